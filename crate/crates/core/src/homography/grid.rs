use std::fmt::Write as _;

use super::HomographyError;

/// A `rows×cols` grid of semantic values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl PatchGrid {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, HomographyError> {
        if rows * cols != data.len() {
            return Err(HomographyError::Dimension {
                expected: (rows, cols),
                found: data.len(),
            });
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(HomographyError::Range(*v));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// Thresholds at `> 0.5`.
    pub fn binarize(&self) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| if v > 0.5 { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// Plain-text PGM (`P2`, maxval 255); each cell is stored as
    /// `round(255·value)`, so reading back is exact only to 1/255.
    pub fn to_pgm(&self) -> String {
        let mut s = format!("P2\n{} {}\n255\n", self.cols, self.rows);
        for r in 0..self.rows {
            let line: Vec<String> = (0..self.cols)
                .map(|c| ((self.get(r, c) * 255.0).round() as u8).to_string())
                .collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }

    pub fn from_pgm(text: &str) -> Result<Self, HomographyError> {
        let mut tokens = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or(""))
            .flat_map(str::split_whitespace);
        let bad = |m: &str| HomographyError::Pgm(m.to_string());
        if tokens.next() != Some("P2") {
            return Err(bad("missing P2 magic"));
        }
        let mut num = |what: &str| -> Result<usize, HomographyError> {
            tokens
                .next()
                .ok_or_else(|| bad(&format!("missing {what}")))?
                .parse()
                .map_err(|_| bad(&format!("bad {what}")))
        };
        let cols = num("width")?;
        let rows = num("height")?;
        let max = num("maxval")?;
        if max == 0 {
            return Err(bad("maxval is zero"));
        }
        let data = (0..rows * cols)
            .map(|_| num("pixel").map(|v| v as f64 / max as f64))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(rows, cols, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_quantizes_to_255() {
        let g = PatchGrid::new(2, 3, vec![0.0, 1.0, 0.5, 0.25, 1.0 / 255.0, 0.999]).unwrap();
        let text = g.to_pgm();
        assert!(text.starts_with("P2\n3 2\n255\n"));
        let back = PatchGrid::from_pgm(&text).unwrap();
        for (a, b) in g.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        let bin = PatchGrid::new(1, 3, vec![0.0, 1.0, 1.0]).unwrap();
        assert_eq!(PatchGrid::from_pgm(&bin.to_pgm()).unwrap(), bin);
    }

    #[test]
    fn rejects_out_of_range_and_bad_files() {
        assert!(PatchGrid::new(1, 2, vec![0.0, 1.5]).is_err());
        assert!(PatchGrid::new(1, 2, vec![0.0]).is_err());
        assert!(PatchGrid::from_pgm("P5\n1 1\n255\n0").is_err());
        assert!(PatchGrid::from_pgm("P2\n2 1\n255\n0").is_err());
    }
}
