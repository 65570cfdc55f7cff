//! Motion sequences and the MSEQ text format.

use std::path::Path;

use ndarray::{Array3, ArrayView3, Axis};

use crate::error::{Error, Result};

/// A `T x N x 3` array of joint coordinates in millimeters plus a frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    frames: Array3<f64>,
    fps: f64,
}

impl MotionSequence {
    pub fn new(frames: Array3<f64>, fps: f64) -> Result<Self> {
        if frames.shape()[0] == 0 || frames.shape()[1] == 0 {
            return Err(Error::Shape(format!(
                "sequence needs at least one frame and one joint, got {:?}",
                frames.shape()
            )));
        }
        if frames.shape()[2] != 3 {
            return Err(Error::Shape(format!(
                "coordinates must be 3-dimensional, got {:?}",
                frames.shape()
            )));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::Value(format!("fps must be positive, got {fps}")));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::Value("non-finite coordinate in sequence".into()));
        }
        Ok(Self { frames, fps })
    }

    pub fn frames(&self) -> ArrayView3<'_, f64> {
        self.frames.view()
    }

    pub fn frames_array(&self) -> &Array3<f64> {
        &self.frames
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn n_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn n_joints(&self) -> usize {
        self.frames.shape()[1]
    }

    /// Copies frames `[start, end)` into a new sequence.
    pub fn slice_frames(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.n_frames() {
            return Err(Error::Shape(format!(
                "frame range [{start}, {end}) invalid for {} frames",
                self.n_frames()
            )));
        }
        let frames = self
            .frames
            .slice(ndarray::s![start..end, .., ..])
            .to_owned();
        Self::new(frames, self.fps)
    }

    /// Appends `horizon` copies of the final frame (the seed pose).
    pub fn pad_with_seed(&self, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Precondition("pad horizon must be >= 1".into()));
        }
        let (t, n, _) = self.frames.dim();
        let mut out = Array3::zeros((t + horizon, n, 3));
        out.slice_mut(ndarray::s![..t, .., ..]).assign(&self.frames);
        let seed = self.frames.index_axis(Axis(0), t - 1);
        for k in 0..horizon {
            out.index_axis_mut(Axis(0), t + k).assign(&seed);
        }
        Self::new(out, self.fps)
    }

    /// Parses the MSEQ text format.
    ///
    /// Line 1: `MSEQ v1`; line 2: `T N FPS`; then `T` lines of `3*N`
    /// space-separated decimals ordered `j0x j0y j0z j1x ...`.
    pub fn parse_mseq(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some("MSEQ v1") => {}
            other => {
                return Err(Error::Format(format!(
                    "expected 'MSEQ v1' header, got {other:?}"
                )))
            }
        }
        let dims = lines
            .next()
            .ok_or_else(|| Error::Format("missing dimension line".into()))?;
        let mut it = dims.split_whitespace();
        let t: usize = it
            .next()
            .ok_or_else(|| Error::Format("dimension line empty".into()))?
            .parse()
            .map_err(|e| Error::Format(format!("bad frame count: {e}")))?;
        let n: usize = it
            .next()
            .ok_or_else(|| Error::Format("dimension line missing joint count".into()))?
            .parse()
            .map_err(|e| Error::Format(format!("bad joint count: {e}")))?;
        let fps: f64 = it
            .next()
            .ok_or_else(|| Error::Format("dimension line missing fps".into()))?
            .parse()
            .map_err(|e| Error::Format(format!("bad fps: {e}")))?;
        if it.next().is_some() {
            return Err(Error::Format("dimension line has trailing tokens".into()));
        }

        let mut data = Vec::with_capacity(t * n * 3);
        let mut rows = 0usize;
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            rows += 1;
            let mut count = 0usize;
            for tok in line.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|e| Error::Value(format!("bad coordinate '{tok}': {e}")))?;
                if !v.is_finite() {
                    return Err(Error::Value(format!("non-finite coordinate '{tok}'")));
                }
                data.push(v);
                count += 1;
            }
            if count != 3 * n {
                return Err(Error::Shape(format!(
                    "row {rows} has {count} tokens, expected {}",
                    3 * n
                )));
            }
        }
        if rows != t {
            return Err(Error::Shape(format!(
                "file has {rows} data rows, header declares {t}"
            )));
        }
        let frames = Array3::from_shape_vec((t, n, 3), data)
            .map_err(|e| Error::Shape(format!("cannot shape data: {e}")))?;
        Self::new(frames, fps)
    }

    /// Renders the sequence in the canonical decimal form: parsing the result
    /// reproduces this sequence bit for bit.
    pub fn to_mseq_string(&self) -> String {
        let (t, n, _) = self.frames.dim();
        let mut s = String::from("MSEQ v1\n");
        s.push_str(&format!("{t} {n} {}\n", self.fps));
        for f in 0..t {
            let mut first = true;
            for j in 0..n {
                for c in 0..3 {
                    if !first {
                        s.push(' ');
                    }
                    first = false;
                    s.push_str(&format!("{}", self.frames[[f, j, c]]));
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn read_mseq_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_mseq(&text)
    }

    pub fn write_mseq_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_mseq_string()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn seq(t: usize, n: usize, fill: f64) -> MotionSequence {
        MotionSequence::new(Array3::from_elem((t, n, 3), fill), 25.0).unwrap()
    }

    #[test]
    fn parse_zero_case() {
        let text = "MSEQ v1\n1 2 25\n0 0 0 0 0 0\n";
        let s = MotionSequence::parse_mseq(text).unwrap();
        assert_eq!(s.n_frames(), 1);
        assert_eq!(s.n_joints(), 2);
        assert_eq!(s.fps(), 25.0);
        assert!(s.frames().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn write_then_parse_is_identity() {
        let mut frames = Array3::zeros((3, 2, 3));
        for (i, v) in frames.iter_mut().enumerate() {
            // awkward decimals to exercise the shortest-round-trip rendering
            *v = (i as f64) * 0.1 - 1.7e-3 + (i as f64).sin() * 123.456;
        }
        let s = MotionSequence::new(frames, 12.5).unwrap();
        let text = s.to_mseq_string();
        let back = MotionSequence::parse_mseq(&text).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_mseq_string(), text);
    }

    #[test]
    fn missing_row_is_shape_error() {
        let s = seq(25, 2, 1.0);
        let text = s.to_mseq_string();
        // drop the final data row
        let truncated: Vec<&str> = text.lines().collect();
        let truncated = truncated[..truncated.len() - 1].join("\n");
        assert!(matches!(
            MotionSequence::parse_mseq(&truncated),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn bad_token_counts_and_values() {
        assert!(matches!(
            MotionSequence::parse_mseq("MSEQ v1\n1 2 25\n0 0 0 0 0\n"),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            MotionSequence::parse_mseq("MSEQ v1\n1 1 25\n0 inf 0\n"),
            Err(Error::Value(_))
        ));
        assert!(matches!(
            MotionSequence::parse_mseq("MSEQ v0\n1 1 25\n0 0 0\n"),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn pad_with_seed_prefix_and_tail() {
        let mut frames = Array3::zeros((3, 1, 3));
        frames[[0, 0, 0]] = 1.0;
        frames[[1, 0, 0]] = 2.0;
        frames[[2, 0, 0]] = 3.0;
        let s = MotionSequence::new(frames, 25.0).unwrap();
        let p = s.pad_with_seed(2).unwrap();
        assert_eq!(p.n_frames(), 5);
        // prefix preserved exactly
        assert_eq!(
            p.frames().slice(ndarray::s![..3, .., ..]),
            s.frames().slice(ndarray::s![.., .., ..])
        );
        // tail equals the seed pose
        assert_eq!(p.frames()[[3, 0, 0]], 3.0);
        assert_eq!(p.frames()[[4, 0, 0]], 3.0);
    }

    #[test]
    fn pad_with_seed_single_step() {
        let s = seq(2, 1, 4.0);
        let p = s.pad_with_seed(1).unwrap();
        assert_eq!(
            p.frames().index_axis(Axis(0), 1),
            p.frames().index_axis(Axis(0), 2)
        );
    }

    #[test]
    fn pad_constant_is_fixed_point() {
        let s = seq(4, 2, 7.0);
        let p = s.pad_with_seed(3).unwrap();
        assert!(p.frames().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn pad_rejects_zero_horizon() {
        assert!(matches!(
            seq(2, 1, 0.0).pad_with_seed(0),
            Err(Error::Precondition(_))
        ));
    }
}
