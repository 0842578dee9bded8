//! Text formats for IMU logs, scans and trajectories.
//!
//! IMU: `t wx wy wz ax ay az` per line. Scans: a `SCAN t_k n` header followed by `n`
//! lines `rho phix phiy phiz d`. Trajectories: `t tx ty tz qx qy qz qw`. Numbers are
//! written with 17 significant digits; `#` starts a comment.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::Matrix2;

use crate::error::{Error, Result};
use crate::kinematics::{ImuSample, Pose};
use crate::manifold::{Rotation, UnitBearing, Vec3};
use crate::uncertainty::LidarRay;

/// Formats with 17 significant digits, enough to round-trip any f64.
pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

struct Tokens<'a> {
    path: &'a str,
    line: usize,
    items: Vec<(usize, &'a str)>,
}

impl<'a> Tokens<'a> {
    /// Splits a line on whitespace, dropping any `#` comment. Columns are 1-based.
    fn new(path: &'a str, line: usize, text: &'a str) -> Self {
        let body = text.split('#').next().unwrap_or("");
        let mut items = Vec::new();
        let mut start = None;
        for (i, c) in body.char_indices() {
            match (c.is_whitespace(), start) {
                (false, None) => start = Some(i),
                (true, Some(s)) => {
                    items.push((s + 1, &body[s..i]));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            items.push((s + 1, &body[s..]));
        }
        Tokens { path, line, items }
    }

    fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    fn error(&self, column: usize, message: impl Into<String>) -> Error {
        Error::Parse { path: self.path.to_string(), line: self.line, column, message: message.into() }
    }

    fn expect_len(&self, n: usize) -> Result<()> {
        if self.items.len() != n {
            let col = self.items.get(n).map_or(1, |t| t.0);
            return Err(self.error(col, format!("expected {n} fields, found {}", self.items.len())));
        }
        Ok(())
    }

    fn f64(&self, i: usize) -> Result<f64> {
        let (col, tok) = self.items[i];
        match tok.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            Ok(_) => Err(self.error(col, format!("non-finite number '{tok}'"))),
            Err(_) => Err(self.error(col, format!("invalid number '{tok}'"))),
        }
    }

    fn vec3(&self, i: usize) -> Result<Vec3> {
        Ok(Vec3::new(self.f64(i)?, self.f64(i + 1)?, self.f64(i + 2)?))
    }
}

fn label(path: &Path) -> String {
    path.display().to_string()
}

/// Parses an IMU log. Timestamps must increase strictly.
pub fn parse_imu<R: BufRead>(reader: R, path: &str) -> Result<Vec<ImuSample>> {
    let mut out: Vec<ImuSample> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let tk = Tokens::new(path, i + 1, &line);
        if tk.is_empty() {
            continue;
        }
        tk.expect_len(7)?;
        let s = ImuSample::new(tk.f64(0)?, tk.vec3(1)?, tk.vec3(4)?);
        if let Some(prev) = out.last() {
            if s.t <= prev.t {
                return Err(tk.error(tk.items[0].0, format!("timestamp {} does not increase", s.t)));
            }
        }
        out.push(s);
    }
    Ok(out)
}

pub fn read_imu(path: &Path) -> Result<Vec<ImuSample>> {
    parse_imu(BufReader::new(File::open(path)?), &label(path))
}

pub fn write_imu<W: Write>(w: &mut W, samples: &[ImuSample]) -> Result<()> {
    writeln!(w, "# t wx wy wz ax ay az")?;
    for s in samples {
        writeln!(
            w,
            "{} {} {} {} {} {} {}",
            num(s.t),
            num(s.gyro.x),
            num(s.gyro.y),
            num(s.gyro.z),
            num(s.acc.x),
            num(s.acc.y),
            num(s.acc.z)
        )?;
    }
    Ok(())
}

/// Mean sampling period of an IMU log; fails if any gap exceeds two mean periods.
pub fn imu_sample_period(samples: &[ImuSample]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::EmptyImuSpan);
    }
    let mean = (samples[samples.len() - 1].t - samples[0].t) / (samples.len() - 1) as f64;
    for w in samples.windows(2) {
        let gap = w[1].t - w[0].t;
        if gap > 2.0 * mean {
            return Err(Error::TimestampGap { t: w[0].t, gap });
        }
    }
    Ok(mean)
}

/// One return as stored on disk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanReturn {
    pub t: f64,
    pub bearing: UnitBearing,
    pub depth: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanRecord {
    pub t_end: f64,
    pub returns: Vec<ScanReturn>,
}

impl ScanRecord {
    /// Attaches the range and bearing noise model to every return.
    pub fn rays(&self, range_std: f64, bearing_std: f64) -> Vec<LidarRay> {
        let bearing_cov = Matrix2::identity() * bearing_std * bearing_std;
        self.returns
            .iter()
            .map(|r| LidarRay {
                bearing: r.bearing,
                depth: r.depth,
                t: r.t,
                range_var: range_std * range_std,
                bearing_cov,
            })
            .collect()
    }
}

/// Streams scans one at a time from a scan file.
pub struct ScanReader<R: BufRead> {
    lines: std::iter::Enumerate<std::io::Lines<R>>,
    path: String,
    last_end: Option<f64>,
}

impl ScanReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self> {
        Ok(ScanReader::new(BufReader::new(File::open(path)?), &label(path)))
    }
}

impl<R: BufRead> ScanReader<R> {
    pub fn new(reader: R, path: &str) -> Self {
        ScanReader { lines: reader.lines().enumerate(), path: path.to_string(), last_end: None }
    }

    fn next_tokens(&mut self) -> Option<Result<(usize, String)>> {
        for (i, line) in self.lines.by_ref() {
            match line {
                Err(e) => return Some(Err(e.into())),
                Ok(l) => {
                    if !Tokens::new(&self.path, i + 1, &l).is_empty() {
                        return Some(Ok((i + 1, l)));
                    }
                }
            }
        }
        None
    }

    fn read_scan(&mut self, line_no: usize, header: &str) -> Result<ScanRecord> {
        let tk = Tokens::new(&self.path, line_no, header);
        if tk.items[0].1 != "SCAN" {
            return Err(tk.error(tk.items[0].0, "expected 'SCAN t_k n_points' header"));
        }
        tk.expect_len(3)?;
        let t_end = tk.f64(1)?;
        let (ncol, ntok) = tk.items[2];
        let n: usize = ntok.parse().map_err(|_| tk.error(ncol, format!("invalid point count '{ntok}'")))?;
        if let Some(prev) = self.last_end {
            if t_end <= prev {
                return Err(tk.error(tk.items[1].0, format!("scan time {t_end} does not increase")));
            }
        }
        let mut returns = Vec::with_capacity(n);
        for _ in 0..n {
            let Some(next) = self.next_tokens() else {
                return Err(Error::Parse {
                    path: self.path.clone(),
                    line: line_no,
                    column: ncol,
                    message: format!("scan declares {n} points but the file ends after {}", returns.len()),
                });
            };
            let (ln, text) = next?;
            let pt = Tokens::new(&self.path, ln, &text);
            pt.expect_len(5)?;
            let t = pt.f64(0)?;
            if t > t_end {
                return Err(pt.error(pt.items[0].0, format!("point time {t} after scan end {t_end}")));
            }
            let phi = pt.vec3(1)?;
            if (phi.norm() - 1.0).abs() > 1e-6 {
                return Err(pt.error(pt.items[1].0, "bearing is not a unit vector"));
            }
            let depth = pt.f64(4)?;
            if depth <= 0.0 {
                return Err(pt.error(pt.items[4].0, "depth must be positive"));
            }
            // Keep written bearings bit-exact; only renormalize visibly off-unit input.
            let bearing = if (phi.norm() - 1.0).abs() <= 1e-12 {
                UnitBearing::new_unchecked(phi)
            } else {
                UnitBearing::new(phi).expect("unit norm checked")
            };
            returns.push(ScanReturn { t, bearing, depth });
        }
        self.last_end = Some(t_end);
        Ok(ScanRecord { t_end, returns })
    }
}

impl<R: BufRead> Iterator for ScanReader<R> {
    type Item = Result<ScanRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        let (line_no, header) = match self.next_tokens()? {
            Ok(v) => v,
            Err(e) => return Some(Err(e)),
        };
        Some(self.read_scan(line_no, &header))
    }
}

pub fn write_scan<W: Write>(w: &mut W, t_end: f64, rays: &[LidarRay]) -> Result<()> {
    writeln!(w, "SCAN {} {}", num(t_end), rays.len())?;
    for r in rays {
        let phi = r.bearing.as_vec();
        writeln!(w, "{} {} {} {} {}", num(r.t), num(phi.x), num(phi.y), num(phi.z), num(r.depth))?;
    }
    Ok(())
}

pub fn write_pose_row<W: Write>(w: &mut W, t: f64, pose: &Pose) -> Result<()> {
    let [qx, qy, qz, qw] = pose.rot.to_quaternion();
    let p = pose.trans;
    writeln!(w, "{} {} {} {} {} {} {} {}", num(t), num(p.x), num(p.y), num(p.z), num(qx), num(qy), num(qz), num(qw))?;
    Ok(())
}

/// Parses a trajectory; quaternions must be unit length to 1e-6.
pub fn parse_trajectory<R: BufRead>(reader: R, path: &str) -> Result<Vec<(f64, Pose)>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let tk = Tokens::new(path, i + 1, &line);
        if tk.is_empty() {
            continue;
        }
        tk.expect_len(8)?;
        let t = tk.f64(0)?;
        let p = tk.vec3(1)?;
        let q = [tk.f64(4)?, tk.f64(5)?, tk.f64(6)?, tk.f64(7)?];
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(tk.error(tk.items[4].0, format!("quaternion norm {norm} is not 1")));
        }
        out.push((t, Pose::new(Rotation::from_quaternion(q[0], q[1], q[2], q[3]), p)));
    }
    Ok(out)
}

pub fn read_trajectory(path: &Path) -> Result<Vec<(f64, Pose)>> {
    parse_trajectory(BufReader::new(File::open(path)?), &label(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::so3_exp;
    use std::io::Cursor;

    #[test]
    fn imu_round_trip_is_exact() {
        let samples: Vec<ImuSample> = (0..50)
            .map(|i| {
                let t = i as f64 * 0.005 + 1.0 / 3.0;
                ImuSample::new(t, Vec3::new(t.sin(), 1e-300, -t), Vec3::new(9.81, t.cos() / 7.0, 0.1))
            })
            .collect();
        let mut buf = Vec::new();
        write_imu(&mut buf, &samples).unwrap();
        assert_eq!(parse_imu(Cursor::new(buf), "mem").unwrap(), samples);
    }

    #[test]
    fn imu_parse_errors_report_position() {
        let err = parse_imu(Cursor::new("0 0 0 0 0 0 9.8\n0.005 0 0 x 0 0 9.8\n"), "imu.txt").unwrap_err();
        assert_eq!(
            err,
            Error::Parse { path: "imu.txt".into(), line: 2, column: 11, message: "invalid number 'x'".into() }
        );
        let err = parse_imu(Cursor::new("# header\n0 0 0 0 0 0\n"), "imu.txt").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = parse_imu(Cursor::new("1 0 0 0 0 0 9.8\n1 0 0 0 0 0 9.8\n"), "imu.txt").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, column: 1, .. }));
    }

    #[test]
    fn gap_detection() {
        let mut s: Vec<ImuSample> =
            (0..100).map(|i| ImuSample::new(i as f64 * 0.005, Vec3::zeros(), Vec3::zeros())).collect();
        assert!((imu_sample_period(&s).unwrap() - 0.005).abs() < 1e-15);
        s.drain(40..45);
        assert!(matches!(imu_sample_period(&s), Err(Error::TimestampGap { .. })));
    }

    fn ray(t: f64, phi: Vec3, d: f64) -> LidarRay {
        LidarRay {
            bearing: UnitBearing::new(phi).unwrap(),
            depth: d,
            t,
            range_var: 4e-4,
            bearing_cov: Matrix2::identity() * 1e-6,
        }
    }

    #[test]
    fn scans_round_trip_and_stream() {
        let a = vec![ray(0.01, Vec3::new(1.0, 2.0, 3.0), 2.5), ray(0.05, Vec3::new(-1.0, 0.0, 0.2), 4.0 / 3.0)];
        let b = vec![ray(0.15, Vec3::new(0.0, 1.0, 0.0), 1.0)];
        let mut buf = Vec::new();
        write_scan(&mut buf, 0.1, &a).unwrap();
        write_scan(&mut buf, 0.2, &b).unwrap();
        let scans: Vec<ScanRecord> = ScanReader::new(Cursor::new(buf), "mem").collect::<Result<_>>().unwrap();
        assert_eq!(scans.len(), 2);
        assert_eq!(scans[0].t_end, 0.1);
        assert_eq!(scans[0].rays(0.02, 1e-3), a);
        assert_eq!(scans[1].rays(0.02, 1e-3), b);
    }

    #[test]
    fn truncated_scan_is_an_error() {
        let text = "SCAN 0.1 3\n0.01 1 0 0 2\n0.02 0 1 0 2\n";
        let r: Vec<Result<ScanRecord>> = ScanReader::new(Cursor::new(text), "s").collect();
        assert!(matches!(&r[0], Err(Error::Parse { line: 1, .. })));
        let r: Vec<_> = ScanReader::new(Cursor::new("SCAN 0.1 1\n0.2 1 0 0 2\n"), "s").collect();
        assert!(matches!(&r[0], Err(Error::Parse { line: 2, column: 1, .. })));
        let r: Vec<_> = ScanReader::new(Cursor::new("0.1 1 0 0 2\n"), "s").collect();
        assert!(matches!(&r[0], Err(Error::Parse { line: 1, .. })));
        assert!(ScanReader::new(Cursor::new("# nothing\n\n"), "s").next().is_none());
    }

    #[test]
    fn trajectory_round_trip() {
        let poses: Vec<(f64, Pose)> = (0..20)
            .map(|i| {
                (
                    i as f64 * 0.1,
                    Pose::new(
                        so3_exp(&Vec3::new(0.1 * i as f64, -0.2, 0.05 * i as f64)),
                        Vec3::new(i as f64, 0.5, -1.0 / 3.0),
                    ),
                )
            })
            .collect();
        let mut buf = Vec::new();
        for (t, p) in &poses {
            write_pose_row(&mut buf, *t, p).unwrap();
        }
        let back = parse_trajectory(Cursor::new(buf), "mem").unwrap();
        for ((ta, a), (tb, b)) in poses.iter().zip(&back) {
            assert_eq!(ta, tb);
            assert_eq!(a.trans, b.trans);
            assert!(a.rot.boxminus(&b.rot).unwrap().norm() < 1e-15);
            assert!(b.rot.orthonormality_error() < 1e-12);
        }
        assert!(parse_trajectory(Cursor::new("0 0 0 0 0 0 0 2\n"), "x").is_err());
    }
}
