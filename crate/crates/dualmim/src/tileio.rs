//! Tile persistence and per-city normalization. The container is a fixed
//! little-endian layout: magic "FMT1", version u16, width/height u32, RGB
//! f32 payload, height f32 payload, label u8 payload, length-prefixed
//! UTF-8 city name, tile id u64. Stats and manifest files are plain text.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{io_err, Error};
use crate::synthdata::PairedTile;

pub const MAGIC: &[u8; 4] = b"FMT1";
pub const VERSION: u16 = 1;
/// Lower bound on every stored sigma; keeps constant channels from
/// dividing by zero during normalization.
pub const SIGMA_FLOOR: f64 = 1e-6;

// ── Container ──────────────────────────────────────────────────────────────

/// Serializes a tile to the container layout. Value ranges are not
/// checked, so normalized tiles persist as well as raw ones.
pub fn tile_to_bytes(tile: &PairedTile) -> Result<Vec<u8>, Error> {
    tile.validate_shape()
        .map_err(|e| Error::Config(format!("refusing to write malformed tile: {e}")))?;
    if tile.size > u32::MAX as usize {
        return Err(Error::Config(format!("tile size {} exceeds u32", tile.size)));
    }
    let n = tile.size * tile.size;
    let mut out = Vec::with_capacity(14 + n * 17 + tile.city.len() + 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tile.size as u32).to_le_bytes());
    out.extend_from_slice(&(tile.size as u32).to_le_bytes());
    for v in &tile.rgb {
        out.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    for v in &tile.dsm {
        out.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    out.extend_from_slice(&tile.labels);
    out.extend_from_slice(&(tile.city.len() as u32).to_le_bytes());
    out.extend_from_slice(tile.city.as_bytes());
    out.extend_from_slice(&tile.tile_id.to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], Error> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                offset: self.buf.len(),
                msg: format!(
                    "truncated while reading {what}: need {} bytes, have {}",
                    self.pos + n,
                    self.buf.len()
                ),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

/// Parses the container layout; the inverse of [`tile_to_bytes`] down to
/// the bit level, including any NaN payloads.
pub fn tile_from_bytes(buf: &[u8]) -> Result<PairedTile, Error> {
    let mut c = Cursor { buf, pos: 0 };
    let magic = c.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {magic:02x?}, expected {MAGIC:02x?}"),
        });
    }
    let version = u16::from_le_bytes(c.take(2, "version")?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}, expected {VERSION}"),
        });
    }
    let width = u32::from_le_bytes(c.take(4, "width")?.try_into().expect("4 bytes")) as usize;
    let height = u32::from_le_bytes(c.take(4, "height")?.try_into().expect("4 bytes")) as usize;
    if width != height || width == 0 {
        return Err(Error::Format {
            offset: 6,
            msg: format!("tiles are square and non-empty, got {width}x{height}"),
        });
    }
    let n = width * height;
    let mut read_f32s = |count: usize, what: &str| -> Result<Vec<f32>, Error> {
        let raw = c.take(count * 4, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f32::from_bits(u32::from_le_bytes(b.try_into().expect("4 bytes"))))
            .collect())
    };
    let rgb = read_f32s(n * 3, "rgb payload")?;
    let dsm = read_f32s(n, "dsm payload")?;
    let label_off = c.pos;
    let labels = c.take(n, "label payload")?.to_vec();
    if let Some(i) = labels.iter().position(|&l| l > 2) {
        return Err(Error::Format {
            offset: label_off + i,
            msg: format!("label {} outside 0..=2", labels[i]),
        });
    }
    let city_len =
        u32::from_le_bytes(c.take(4, "city length")?.try_into().expect("4 bytes")) as usize;
    let city_off = c.pos;
    let city = String::from_utf8(c.take(city_len, "city name")?.to_vec()).map_err(|e| {
        Error::Format {
            offset: city_off,
            msg: format!("city name is not UTF-8: {e}"),
        }
    })?;
    let tile_id = u64::from_le_bytes(c.take(8, "tile id")?.try_into().expect("8 bytes"));
    if c.pos != buf.len() {
        return Err(Error::Format {
            offset: c.pos,
            msg: format!("{} trailing bytes after tile", buf.len() - c.pos),
        });
    }
    Ok(PairedTile {
        rgb,
        dsm,
        labels,
        size: width,
        city,
        tile_id,
    })
}

pub fn write_tile(tile: &PairedTile, path: &Path) -> Result<(), Error> {
    let bytes = tile_to_bytes(tile)?;
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

pub fn read_tile(path: &Path) -> Result<PairedTile, Error> {
    let buf = fs::read(path).map_err(|e| io_err(path, e))?;
    tile_from_bytes(&buf)
}

// ── Normalization statistics ───────────────────────────────────────────────

/// Per-city channel statistics: mean and population stddev for each RGB
/// channel and for the height channel, sigmas clamped to [`SIGMA_FLOOR`].
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub city: String,
    pub mu_rgb: [f64; 3],
    pub sigma_rgb: [f64; 3],
    pub mu_dsm: f64,
    pub sigma_dsm: f64,
}

/// How RGB statistics are aggregated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RgbStats {
    /// One (mu, sigma) per RGB channel.
    PerChannel,
    /// One (mu, sigma) pooled over all three channels, replicated into
    /// the per-channel slots.
    Pooled,
}

/// Population statistics over every pixel of every tile. All tiles must
/// carry the given city id.
pub fn compute_city_stats(
    tiles: &[PairedTile],
    city: &str,
    mode: RgbStats,
) -> Result<NormStats, Error> {
    if tiles.is_empty() {
        return Err(Error::Config(format!("no tiles for city {city:?}")));
    }
    if let Some(t) = tiles.iter().find(|t| t.city != city) {
        return Err(Error::Config(format!(
            "tile {} belongs to city {:?}, not {:?}",
            t.tile_id, t.city, city
        )));
    }
    let mut sum = [0.0f64; 4];
    let mut sumsq = [0.0f64; 4];
    let mut count = 0usize;
    for t in tiles {
        t.validate_shape()?;
        for px in t.rgb.chunks_exact(3) {
            for c in 0..3 {
                let v = px[c] as f64;
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("rgb of tile {}", t.tile_id)));
                }
                sum[c] += v;
                sumsq[c] += v * v;
            }
        }
        for &v in &t.dsm {
            let v = v as f64;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("dsm of tile {}", t.tile_id)));
            }
            sum[3] += v;
            sumsq[3] += v * v;
        }
        count += t.size * t.size;
    }
    let n = count as f64;
    let stat = |s: f64, sq: f64, n: f64| -> (f64, f64) {
        let mu = s / n;
        let var = (sq / n - mu * mu).max(0.0);
        (mu, var.sqrt().max(SIGMA_FLOOR))
    };
    let (mut mu_rgb, mut sigma_rgb) = ([0.0; 3], [0.0; 3]);
    match mode {
        RgbStats::PerChannel => {
            for c in 0..3 {
                let (mu, sigma) = stat(sum[c], sumsq[c], n);
                mu_rgb[c] = mu;
                sigma_rgb[c] = sigma;
            }
        }
        RgbStats::Pooled => {
            let (mu, sigma) = stat(
                sum[0] + sum[1] + sum[2],
                sumsq[0] + sumsq[1] + sumsq[2],
                3.0 * n,
            );
            mu_rgb = [mu; 3];
            sigma_rgb = [sigma; 3];
        }
    }
    let (mu_dsm, sigma_dsm) = stat(sum[3], sumsq[3], n);
    Ok(NormStats {
        city: city.to_string(),
        mu_rgb,
        sigma_rgb,
        mu_dsm,
        sigma_dsm,
    })
}

fn check_city(tile: &PairedTile, stats: &NormStats) -> Result<(), Error> {
    if tile.city != stats.city {
        return Err(Error::Config(format!(
            "tile city {:?} does not match stats city {:?}",
            tile.city, stats.city
        )));
    }
    Ok(())
}

/// (x − μ)/σ per channel. Labels and identity fields pass through.
pub fn normalize(tile: &PairedTile, stats: &NormStats) -> Result<PairedTile, Error> {
    check_city(tile, stats)?;
    let mut out = tile.clone();
    for px in out.rgb.chunks_exact_mut(3) {
        for c in 0..3 {
            px[c] = ((px[c] as f64 - stats.mu_rgb[c]) / stats.sigma_rgb[c]) as f32;
        }
    }
    for v in &mut out.dsm {
        *v = ((*v as f64 - stats.mu_dsm) / stats.sigma_dsm) as f32;
    }
    Ok(out)
}

/// Inverse of [`normalize`] up to float roundoff.
pub fn denormalize(tile: &PairedTile, stats: &NormStats) -> Result<PairedTile, Error> {
    check_city(tile, stats)?;
    let mut out = tile.clone();
    for px in out.rgb.chunks_exact_mut(3) {
        for c in 0..3 {
            px[c] = (px[c] as f64 * stats.sigma_rgb[c] + stats.mu_rgb[c]) as f32;
        }
    }
    for v in &mut out.dsm {
        *v = (*v as f64 * stats.sigma_dsm + stats.mu_dsm) as f32;
    }
    Ok(out)
}

// ── Stats file ─────────────────────────────────────────────────────────────

/// One line per city: `city mu_r mu_g mu_b sg_r sg_g sg_b mu_d sg_d`.
/// f64 Display prints shortest-roundtrip decimals, so read(write(s)) is
/// exact.
pub fn write_stats(stats: &[NormStats], path: &Path) -> Result<(), Error> {
    let mut out = String::new();
    for s in stats {
        if s.city.chars().any(char::is_whitespace) || s.city.is_empty() {
            return Err(Error::Config(format!(
                "city {:?} not representable in the stats format",
                s.city
            )));
        }
        out.push_str(&format!(
            "{} {} {} {} {} {} {} {} {}\n",
            s.city,
            s.mu_rgb[0],
            s.mu_rgb[1],
            s.mu_rgb[2],
            s.sigma_rgb[0],
            s.sigma_rgb[1],
            s.sigma_rgb[2],
            s.mu_dsm,
            s.sigma_dsm
        ));
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

pub fn read_stats(path: &Path) -> Result<Vec<NormStats>, Error> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 9 {
            return Err(Error::Config(format!(
                "{}:{}: expected 9 fields, got {}",
                path.display(),
                ln + 1,
                fields.len()
            )));
        }
        let num = |i: usize| -> Result<f64, Error> {
            fields[i].parse().map_err(|e| {
                Error::Config(format!(
                    "{}:{}: field {i} ({:?}): {e}",
                    path.display(),
                    ln + 1,
                    fields[i]
                ))
            })
        };
        out.push(NormStats {
            city: fields[0].to_string(),
            mu_rgb: [num(1)?, num(2)?, num(3)?],
            sigma_rgb: [num(4)?, num(5)?, num(6)?],
            mu_dsm: num(7)?,
            sigma_dsm: num(8)?,
        });
    }
    Ok(out)
}

/// Keyed lookup; errors on duplicate or missing cities.
pub fn stats_by_city(stats: &[NormStats]) -> Result<BTreeMap<String, NormStats>, Error> {
    let mut map = BTreeMap::new();
    for s in stats {
        if map.insert(s.city.clone(), s.clone()).is_some() {
            return Err(Error::Config(format!("duplicate stats for city {:?}", s.city)));
        }
    }
    Ok(map)
}

// ── Manifest ───────────────────────────────────────────────────────────────

/// One corpus entry: tile path relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub city: String,
    pub tile_id: u64,
}

/// `<relative-path>\t<city>\t<tile_id>` per line, LF endings.
pub fn write_manifest(entries: &[ManifestEntry], path: &Path) -> Result<(), Error> {
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    for e in entries {
        let p = e.path.to_str().ok_or_else(|| {
            Error::Config(format!("tile path {:?} is not UTF-8", e.path))
        })?;
        if p.contains('\t') || p.contains('\n') {
            return Err(Error::Config(format!(
                "tile path {p:?} contains separator characters"
            )));
        }
        writeln!(f, "{p}\t{}\t{}", e.city, e.tile_id).map_err(|er| io_err(path, er))?;
    }
    f.flush().map_err(|e| io_err(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, Error> {
    let mut text = String::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Config(format!(
                "{}:{}: expected 3 tab-separated fields, got {}",
                path.display(),
                ln + 1,
                fields.len()
            )));
        }
        let tile_id = fields[2].parse().map_err(|e| {
            Error::Config(format!(
                "{}:{}: tile id {:?}: {e}",
                path.display(),
                ln + 1,
                fields[2]
            ))
        })?;
        out.push(ManifestEntry {
            path: PathBuf::from(fields[0]),
            city: fields[1].to_string(),
            tile_id,
        });
    }
    Ok(out)
}

/// Writes a corpus (tiles + manifest) under `dir`; tile files are named
/// `<city>_<id>.fmt`. Returns the manifest path.
pub fn write_corpus(tiles: &[PairedTile], dir: &Path) -> Result<PathBuf, Error> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut entries = Vec::with_capacity(tiles.len());
    for t in tiles {
        let name = format!("{}_{:06}.fmt", t.city, t.tile_id);
        write_tile(t, &dir.join(&name))?;
        entries.push(ManifestEntry {
            path: PathBuf::from(name),
            city: t.city.clone(),
            tile_id: t.tile_id,
        });
    }
    let manifest = dir.join("manifest.tsv");
    write_manifest(&entries, &manifest)?;
    Ok(manifest)
}

/// Loads every tile listed in a manifest, resolving paths relative to the
/// manifest's directory. Checks the manifest identity fields against the
/// container contents.
pub fn load_corpus(manifest: &Path) -> Result<Vec<PairedTile>, Error> {
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    let mut tiles = Vec::new();
    for e in read_manifest(manifest)? {
        let t = read_tile(&base.join(&e.path))?;
        if t.city != e.city || t.tile_id != e.tile_id {
            return Err(Error::Config(format!(
                "manifest says {}:{} but {} holds {}:{}",
                e.city,
                e.tile_id,
                e.path.display(),
                t.city,
                t.tile_id
            )));
        }
        tiles.push(t);
    }
    Ok(tiles)
}
