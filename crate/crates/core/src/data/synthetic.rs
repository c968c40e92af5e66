use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Recipe for a small CIFAR-like classification set with two cues per image:
///
/// * a coarse cue, a flat background colour present with probability `colour_presence`
///   (otherwise the background is neutral grey). A present colour is the class's own with
///   probability `colour_agreement`, else that of a uniformly drawn class. Colours sit on a
///   lattice far wider than any small pixel budget, so an `l_inf` attacker cannot move it;
/// * a fine cue, a period-2 texture of amplitude `texture_amplitude` that always matches the
///   label and is small enough for the same attacker to erase and replace.
///
/// Clean training favours the fine cue; adversarial training can only use the coarse one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub size: usize,
    pub colour_presence: f64,
    pub colour_agreement: f64,
    pub texture_amplitude: f64,
    pub noise_std: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            size: 8,
            colour_presence: 0.5,
            colour_agreement: 0.7,
            texture_amplitude: 5.0 / 255.0,
            noise_std: 0.01,
        }
    }
}

const LEVELS: [f64; 3] = [0.3, 0.5, 0.7];

/// Background of images without a colour cue; the palette never uses it.
pub const GREY: [f64; 3] = [0.5; 3];

/// 12x12 Hadamard matrix from the Paley construction over GF(11).
fn hadamard12() -> [[i8; 12]; 12] {
    let residue = |v: usize| [1, 3, 4, 5, 9].contains(&(v % 11));
    let chi = |d: isize| -> i8 {
        let v = d.rem_euclid(11) as usize;
        if v == 0 {
            0
        } else if residue(v) {
            1
        } else {
            -1
        }
    };
    let mut s = [[0i8; 12]; 12];
    for j in 1..12 {
        s[0][j] = 1;
        s[j][0] = -1;
    }
    for i in 1..12 {
        for j in 1..12 {
            s[i][j] = chi(j as isize - i as isize);
        }
    }
    let mut h = s;
    for (i, row) in h.iter_mut().enumerate() {
        row[i] += 1;
    }
    h
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=10).contains(&self.classes) {
            return Err(Error::config("synthetic data supports 2..=10 classes"));
        }
        if self.size < 2 || !self.size.is_multiple_of(2) {
            return Err(Error::config("synthetic image size must be even and >= 2"));
        }
        let unit = 0.0..=1.0;
        if !unit.contains(&self.colour_presence)
            || !unit.contains(&self.colour_agreement)
            || self.texture_amplitude < 0.0
            || self.noise_std < 0.0
        {
            return Err(Error::config("synthetic cue parameters out of range"));
        }
        Ok(())
    }

    /// Background colour of each class: distinct points of a 3-level RGB lattice.
    pub fn palette(&self) -> Vec<[f64; 3]> {
        let mut all = Vec::with_capacity(27);
        for r in LEVELS {
            for g in LEVELS {
                for b in LEVELS {
                    all.push([r, g, b]);
                }
            }
        }
        // Fixed stride through the lattice spreads consecutive classes apart.
        (0..self.classes).map(|k| all[(k * 7 + 1) % 27]).collect()
    }

    /// Texture tile `[channel][row % 2][col % 2]` of each class, entries `+-1`, mutually orthogonal.
    pub fn textures(&self) -> Vec<[[[f64; 2]; 2]; 3]> {
        let h = hadamard12();
        (0..self.classes)
            .map(|k| {
                let row = &h[k + 1];
                let mut t = [[[0.0; 2]; 2]; 3];
                for (i, &v) in row.iter().enumerate() {
                    t[i / 4][(i / 2) % 2][i % 2] = v as f64;
                }
                t
            })
            .collect()
    }

    pub fn generate(&self, n: usize, seed: u64) -> Result<Dataset> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, self.noise_std).map_err(|e| Error::config(e.to_string()))?;
        let palette = self.palette();
        let textures = self.textures();
        let s = self.size;
        let mut pixels = Vec::with_capacity(n * 3 * s * s);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let y = rng.random_range(0..self.classes);
            let colour = if !rng.random_bool(self.colour_presence) {
                GREY
            } else if rng.random_bool(self.colour_agreement) {
                palette[y]
            } else {
                palette[rng.random_range(0..self.classes)]
            };
            for (c, base) in colour.iter().enumerate() {
                for row in 0..s {
                    for col in 0..s {
                        let v =
                            base + self.texture_amplitude * textures[y][c][row % 2][col % 2] + noise.sample(&mut rng);
                        pixels.push(v.clamp(0.0, 1.0) as f32);
                    }
                }
            }
            labels.push(y);
        }
        Dataset::new(Tensor::from_vec(&[n, 3, s, s], pixels)?, labels, self.classes)
    }
}
