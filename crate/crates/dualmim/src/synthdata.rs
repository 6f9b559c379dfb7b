//! Deterministic procedural city tiles: paired RGB and surface-height
//! rasters with pixel labels. Buildings are axis-aligned rectangles with
//! flat or gable roofs on zero ground; RGB renders the height field with
//! Lambertian shading under a per-city sun. Per-building albedo is drawn
//! independently of height, so class is not inferable from color alone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Error;

/// Fraction of ambient light; the rest follows the surface normal.
const AMBIENT: f32 = 0.25;
/// Per-pixel uniform noise half-range added to rendered RGB.
const NOISE: f32 = 0.02;
/// Ground coverage never exceeds this, so every tile keeps ground pixels.
const MAX_COVER: f64 = 0.9;

/// Generation parameters for one synthetic city.
#[derive(Debug, Clone, PartialEq)]
pub struct CityPreset {
    pub name: String,
    /// Target fraction of tile area covered by buildings.
    pub building_density: f64,
    /// Building heights are drawn uniformly from this range (meters).
    pub height_range: (f64, f64),
    /// Inclusive integer range the per-building albedo key is drawn from.
    pub albedo_seed_range: (u64, u64),
    /// Sun direction: azimuth degrees from the +x (column) axis toward +y
    /// (row) axis, elevation degrees above the horizon.
    pub sun_azimuth: f64,
    pub sun_elevation: f64,
}

impl CityPreset {
    pub fn validate(&self) -> Result<(), Error> {
        if self.name.is_empty() || self.name.chars().any(char::is_whitespace) {
            return Err(Error::Config(format!(
                "city name {:?} must be non-empty without whitespace",
                self.name
            )));
        }
        if !(0.0..=1.0).contains(&self.building_density) {
            return Err(Error::Config(format!(
                "building_density {} outside [0, 1]",
                self.building_density
            )));
        }
        let (lo, hi) = self.height_range;
        if !(lo >= 0.0 && lo < hi) {
            return Err(Error::Config(format!(
                "height_range ({lo}, {hi}) needs 0 <= min < max"
            )));
        }
        if self.albedo_seed_range.0 > self.albedo_seed_range.1 {
            return Err(Error::Config("albedo_seed_range is empty".into()));
        }
        if !(self.sun_elevation > 0.0 && self.sun_elevation <= 90.0) {
            return Err(Error::Config(format!(
                "sun_elevation {} outside (0, 90]",
                self.sun_elevation
            )));
        }
        if !self.sun_azimuth.is_finite() {
            return Err(Error::Config("sun_azimuth must be finite".into()));
        }
        Ok(())
    }

    /// Class boundary between low and tall buildings: midpoint of the
    /// height range, which balances the two building classes.
    pub fn tall_threshold(&self) -> f64 {
        0.5 * (self.height_range.0 + self.height_range.1)
    }
}

/// Three cities with distinct densities, height regimes, palettes, and
/// sun geometry, so per-city normalization has real work to do. Densities
/// straddle one half so the dominant label varies across tiles: sparse
/// flatford stays ground-dominant while the denser cities tip toward
/// whichever building class their height draws favor.
pub fn default_presets() -> Vec<CityPreset> {
    vec![
        CityPreset {
            name: "flatford".into(),
            building_density: 0.25,
            height_range: (4.0, 16.0),
            albedo_seed_range: (0, 499),
            sun_azimuth: 135.0,
            sun_elevation: 45.0,
        },
        CityPreset {
            name: "gablewick".into(),
            building_density: 0.75,
            height_range: (6.0, 30.0),
            albedo_seed_range: (500, 999),
            sun_azimuth: 225.0,
            sun_elevation: 35.0,
        },
        CityPreset {
            name: "towerline".into(),
            building_density: 0.60,
            height_range: (10.0, 60.0),
            albedo_seed_range: (1000, 1499),
            sun_azimuth: 60.0,
            sun_elevation: 55.0,
        },
    ]
}

pub fn preset_by_name(name: &str) -> Result<CityPreset, Error> {
    default_presets()
        .into_iter()
        .find(|p| p.name == name)
        .ok_or_else(|| {
            let known: Vec<String> = default_presets().into_iter().map(|p| p.name).collect();
            Error::Config(format!("unknown city {name:?}; presets: {}", known.join(", ")))
        })
}

/// One co-registered sample: RGB reflectance in [0,1] (H·W·3,
/// channel-innermost), surface height in meters (H·W, >= 0 when raw),
/// pixel labels (0 ground, 1 low, 2 tall), square side, source city, id.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedTile {
    pub rgb: Vec<f32>,
    pub dsm: Vec<f32>,
    pub labels: Vec<u8>,
    pub size: usize,
    pub city: String,
    pub tile_id: u64,
}

impl PairedTile {
    pub fn validate_shape(&self) -> Result<(), Error> {
        let n = self.size * self.size;
        if self.rgb.len() != n * 3 || self.dsm.len() != n || self.labels.len() != n {
            return Err(Error::Config(format!(
                "tile arrays disagree with size {}: rgb {}, dsm {}, labels {}",
                self.size,
                self.rgb.len(),
                self.dsm.len(),
                self.labels.len()
            )));
        }
        Ok(())
    }
}

/// Label classes: ground (0), low (1), tall (2).
pub const NUM_CLASSES: usize = 3;

/// Threshold partition of a height field: 0 where exactly zero, 1 where
/// at most `tall_threshold`, 2 above it.
pub fn derive_labels(dsm: &[f32], tall_threshold: f64) -> Vec<u8> {
    dsm.iter()
        .map(|&h| {
            if h == 0.0 {
                0
            } else if (h as f64) <= tall_threshold {
                1
            } else {
                2
            }
        })
        .collect()
}

/// Record of one placed building; read by the correlation diagnostics in
/// the tests.
#[cfg_attr(not(test), allow(dead_code))]
struct PlacedBuilding {
    height: f64,
    albedo: [f32; 3],
}

/// Deterministic color from an albedo key; has no height input by
/// construction.
fn palette(key: u64) -> [f32; 3] {
    let mut x = key.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut next = || {
        x ^= x >> 30;
        x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x ^= x >> 27;
        x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^= x >> 31;
        (x >> 40) as f32 / (1u64 << 24) as f32
    };
    [
        0.15 + 0.75 * next(),
        0.15 + 0.75 * next(),
        0.15 + 0.75 * next(),
    ]
}

/// Rasterizes buildings and returns (dsm, per-pixel albedo, buildings).
/// Overlaps keep the taller surface.
fn place_buildings(
    preset: &CityPreset,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<f32>, Vec<[f32; 3]>, Vec<PlacedBuilding>) {
    let ground_albedo = [0.32f32, 0.36, 0.30];
    let mut dsm = vec![0.0f32; size * size];
    let mut albedo = vec![ground_albedo; size * size];
    let mut buildings = Vec::new();

    let target = (preset.building_density.min(MAX_COVER) * (size * size) as f64) as usize;
    let mut covered = 0usize;
    let mut attempts = 0usize;
    let (min_side, max_side) = ((size / 8).max(2), (size / 3).max(3));
    while covered < target && attempts < 400 {
        attempts += 1;
        let w = rng.gen_range(min_side..=max_side);
        let h = rng.gen_range(min_side..=max_side);
        if w > size || h > size {
            continue;
        }
        let x0 = rng.gen_range(0..=size - w);
        let y0 = rng.gen_range(0..=size - h);
        let height = rng.gen_range(preset.height_range.0..preset.height_range.1);
        let gable = rng.gen::<bool>();
        let key = rng.gen_range(preset.albedo_seed_range.0..=preset.albedo_seed_range.1);
        let color = palette(key);
        buildings.push(PlacedBuilding {
            height,
            albedo: color,
        });

        // Gable roofs slope from 0.6·height at the long edges to the full
        // height at the ridge, which runs along the longer axis.
        let ridge_along_x = w >= h;
        for dy in 0..h {
            for dx in 0..w {
                let p = (y0 + dy) * size + x0 + dx;
                let z64 = if !gable {
                    height
                } else {
                    let (t, span) = if ridge_along_x {
                        (dy as f64 + 0.5, h as f64)
                    } else {
                        (dx as f64 + 0.5, w as f64)
                    };
                    let ridge_dist = (2.0 * t / span - 1.0).abs();
                    height * (1.0 - 0.4 * ridge_dist)
                };
                let z = z64 as f32;
                if dsm[p] == 0.0 {
                    covered += 1;
                }
                if z > dsm[p] {
                    dsm[p] = z;
                    albedo[p] = color;
                }
            }
        }
    }
    (dsm, albedo, buildings)
}

/// Lambertian shading of the height field (1 m per pixel, central
/// differences, one-sided at edges) plus per-pixel noise.
fn shade(
    dsm: &[f32],
    albedo: &[[f32; 3]],
    size: usize,
    preset: &CityPreset,
    rng: &mut ChaCha8Rng,
) -> Vec<f32> {
    let az = preset.sun_azimuth.to_radians();
    let el = preset.sun_elevation.to_radians();
    let sun = [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()];
    let z_at = |x: i64, y: i64| -> f64 {
        let xc = x.clamp(0, size as i64 - 1) as usize;
        let yc = y.clamp(0, size as i64 - 1) as usize;
        dsm[yc * size + xc] as f64
    };
    let mut rgb = vec![0.0f32; size * size * 3];
    for y in 0..size as i64 {
        for x in 0..size as i64 {
            let dzdx = 0.5 * (z_at(x + 1, y) - z_at(x - 1, y));
            let dzdy = 0.5 * (z_at(x, y + 1) - z_at(x, y - 1));
            let inv = 1.0 / (dzdx * dzdx + dzdy * dzdy + 1.0).sqrt();
            let n = [-dzdx * inv, -dzdy * inv, inv];
            let lit = (n[0] * sun[0] + n[1] * sun[1] + n[2] * sun[2]).max(0.0) as f32;
            let light = AMBIENT + (1.0 - AMBIENT) * lit;
            let p = (y as usize) * size + x as usize;
            for c in 0..3 {
                let noise = (rng.gen::<f32>() - 0.5) * 2.0 * NOISE;
                rgb[p * 3 + c] = (albedo[p][c] * light + noise).clamp(0.0, 1.0);
            }
        }
    }
    rgb
}

fn render_tile(
    preset: &CityPreset,
    size: usize,
    tile_id: u64,
    rng: &mut ChaCha8Rng,
) -> (PairedTile, Vec<PlacedBuilding>) {
    let (dsm, albedo, buildings) = place_buildings(preset, size, rng);
    let rgb = shade(&dsm, &albedo, size, preset, rng);
    let labels = derive_labels(&dsm, preset.tall_threshold());
    (
        PairedTile {
            rgb,
            dsm,
            labels,
            size,
            city: preset.name.clone(),
            tile_id,
        },
        buildings,
    )
}

/// Generates `n` tiles. A pure function of its arguments: each tile uses
/// its own seeded stream, so output is bit-identical across calls.
pub fn generate_tiles(
    preset: &CityPreset,
    n: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<PairedTile>, Error> {
    preset.validate()?;
    if n == 0 {
        return Err(Error::Config("tile count must be >= 1".into()));
    }
    if size < 8 {
        return Err(Error::Config(format!("tile size {size} below minimum 8")));
    }
    let mut tiles = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        tiles.push(render_tile(preset, size, i as u64, &mut rng).0);
    }
    Ok(tiles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn preset() -> CityPreset {
        default_presets().remove(0)
    }

    #[test]
    fn generation_is_bit_identical_per_seed() {
        let p = preset();
        let a = generate_tiles(&p, 4, 64, 7).unwrap();
        let b = generate_tiles(&p, 4, 64, 7).unwrap();
        assert_eq!(a.len(), 4);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x, y);
            // f32 equality above is not bit equality; check the bits too.
            assert!(x
                .rgb
                .iter()
                .zip(&y.rgb)
                .all(|(u, v)| u.to_bits() == v.to_bits()));
            assert!(x
                .dsm
                .iter()
                .zip(&y.dsm)
                .all(|(u, v)| u.to_bits() == v.to_bits()));
        }
        let c = generate_tiles(&p, 4, 64, 8).unwrap();
        assert_ne!(a[0], c[0]);
    }

    #[test]
    fn heights_stay_in_range_with_ground_present() {
        for p in default_presets() {
            for t in generate_tiles(&p, 5, 64, 3).unwrap() {
                let min = t.dsm.iter().cloned().fold(f32::INFINITY, f32::min);
                let max = t.dsm.iter().cloned().fold(0.0f32, f32::max);
                assert_eq!(min, 0.0, "{}: no ground left", p.name);
                assert!((max as f64) <= p.height_range.1, "{}: {max}", p.name);
            }
        }
    }

    #[test]
    fn labels_partition_the_height_field() {
        let p = preset();
        let thr = p.tall_threshold();
        for t in generate_tiles(&p, 6, 64, 11).unwrap() {
            for (i, &h) in t.dsm.iter().enumerate() {
                let expect = if h == 0.0 {
                    0
                } else if (h as f64) <= thr {
                    1
                } else {
                    2
                };
                assert_eq!(t.labels[i], expect);
            }
        }
    }

    #[test]
    fn label_hand_example() {
        assert_eq!(derive_labels(&[0.0, 3.0, 9.0, 0.0], 5.0), vec![0, 1, 2, 0]);
        assert_eq!(derive_labels(&[0.0; 4], 5.0), vec![0; 4]);
    }

    #[test]
    fn stored_labels_match_recomputation() {
        let p = preset();
        for t in generate_tiles(&p, 3, 32, 13).unwrap() {
            assert_eq!(derive_labels(&t.dsm, p.tall_threshold()), t.labels);
        }
    }

    #[test]
    fn rgb_stays_in_unit_range() {
        for t in generate_tiles(&preset(), 4, 64, 17).unwrap() {
            assert!(t.rgb.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn coverage_tracks_density() {
        for p in default_presets() {
            let mut frac = 0.0;
            let tiles = generate_tiles(&p, 8, 64, 19).unwrap();
            for t in &tiles {
                frac += t.dsm.iter().filter(|&&h| h > 0.0).count() as f64 / 4096.0;
            }
            frac /= tiles.len() as f64;
            assert!(
                frac >= p.building_density * 0.9 && frac <= p.building_density + 0.25,
                "{}: coverage {frac} vs density {}",
                p.name,
                p.building_density
            );
        }
    }

    #[test]
    fn albedo_is_uncorrelated_with_height() {
        // Per-building (height, mean albedo) over enough buildings for a
        // stable correlation estimate.
        let p = preset();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut i = 0u64;
        while xs.len() < 150 {
            let mut rng = ChaCha8Rng::seed_from_u64(29);
            rng.set_stream(i + 1);
            let (_, buildings) = render_tile(&p, 64, i, &mut rng);
            for b in buildings {
                xs.push(b.height);
                ys.push(((b.albedo[0] + b.albedo[1] + b.albedo[2]) / 3.0) as f64);
            }
            i += 1;
        }
        let n = xs.len() as f64;
        let (mx, my) = (
            xs.iter().sum::<f64>() / n,
            ys.iter().sum::<f64>() / n,
        );
        let (mut cov, mut vx, mut vy) = (0.0, 0.0, 0.0);
        for (x, y) in xs.iter().zip(&ys) {
            cov += (x - mx) * (y - my);
            vx += (x - mx) * (x - mx);
            vy += (y - my) * (y - my);
        }
        let r = cov / (vx.sqrt() * vy.sqrt());
        assert!(r.abs() < 0.2, "albedo/height correlation {r}");
    }

    #[test]
    fn invalid_presets_and_args_are_rejected() {
        let mut p = preset();
        p.building_density = 1.2;
        assert!(p.validate().is_err());
        let mut p = preset();
        p.height_range = (10.0, 5.0);
        assert!(p.validate().is_err());
        let mut p = preset();
        p.name = "two words".into();
        assert!(p.validate().is_err());
        assert!(generate_tiles(&preset(), 0, 64, 1).is_err());
        assert!(generate_tiles(&preset(), 1, 4, 1).is_err());
        assert!(preset_by_name("atlantis").is_err());
        assert_eq!(preset_by_name("flatford").unwrap(), preset());
    }

    #[test]
    fn presets_are_distinct_and_valid() {
        let ps = default_presets();
        assert!(ps.len() >= 3);
        for p in &ps {
            p.validate().unwrap();
        }
        let mut names: Vec<&str> = ps.iter().map(|p| p.name.as_str()).collect();
        names.dedup();
        assert_eq!(names.len(), ps.len());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn labels_always_partition(seed in 0u64..1000) {
            let p = preset();
            let t = &generate_tiles(&p, 1, 32, seed).unwrap()[0];
            let thr = p.tall_threshold();
            for (i, &h) in t.dsm.iter().enumerate() {
                prop_assert_eq!(t.labels[i] == 0, h == 0.0);
                prop_assert_eq!(t.labels[i] == 2, (h as f64) > thr);
            }
        }
    }
}
