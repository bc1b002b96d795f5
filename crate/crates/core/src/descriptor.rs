//! Polar cell partitioning, per-cell Gaussian statistics and the NDD
//! encodings.
//!
//! The two-scale descriptor stacks the density-score block on top of the
//! entropy block, giving a `(2 * num_rings) x num_sectors` matrix. Columns
//! follow the azimuth, so yawing the sensor by `2 * pi * k / num_sectors`
//! circularly shifts the columns by `k`.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use crate::error::{NddError, Result};
use crate::pointcloud::{self, Point3, PointCloud};

/// Eigenvalues below this fraction of the largest one are raised to it.
pub const EIGEN_FLOOR_RATIO: f64 = 1e-3;
/// Cells whose largest covariance eigenvalue is at or below this are empty.
pub const MIN_EIGENVALUE: f64 = 1e-12;

const DIM: f64 = 3.0;

/// Per-cell feature written into the descriptor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Encoding {
    /// Probability density score only.
    P,
    /// Differential entropy only.
    E,
    /// Maximum height (Scan Context style).
    H,
    /// Density block stacked over the entropy block.
    PPlusE,
}

impl Encoding {
    pub const ALL: [Encoding; 4] = [Encoding::H, Encoding::E, Encoding::P, Encoding::PPlusE];

    pub fn tag(self) -> u8 {
        match self {
            Encoding::P => 0,
            Encoding::E => 1,
            Encoding::H => 2,
            Encoding::PPlusE => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Encoding> {
        Some(match tag {
            0 => Encoding::P,
            1 => Encoding::E,
            2 => Encoding::H,
            3 => Encoding::PPlusE,
            _ => return None,
        })
    }

    /// Number of `num_rings`-high blocks in the stacked matrix.
    pub fn blocks(self) -> usize {
        match self {
            Encoding::PPlusE => 2,
            _ => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Encoding::P => "P",
            Encoding::E => "E",
            Encoding::H => "H",
            Encoding::PPlusE => "P+E",
        }
    }
}

impl fmt::Display for Encoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Encoding {
    type Err = NddError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "p" => Ok(Encoding::P),
            "e" => Ok(Encoding::E),
            "h" => Ok(Encoding::H),
            "p+e" | "p_plus_e" | "pe" | "ppluse" => Ok(Encoding::PPlusE),
            _ => Err(NddError::InvalidConfig(format!("unknown encoding '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorConfig {
    pub num_rings: usize,
    pub num_sectors: usize,
    pub max_range: f64,
    pub min_cell_points: usize,
    pub encoding: Encoding,
    pub pca_enabled: bool,
    /// Voxel leaf in meters; `0` disables downsampling.
    pub downsample_leaf: f64,
}

impl Default for DescriptorConfig {
    fn default() -> Self {
        DescriptorConfig {
            num_rings: 20,
            num_sectors: 60,
            max_range: 80.0,
            min_cell_points: 5,
            encoding: Encoding::PPlusE,
            pca_enabled: true,
            downsample_leaf: 0.25,
        }
    }
}

impl DescriptorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(NddError::InvalidConfig(msg.to_string()));
        if self.num_rings < 1 {
            return bad("num_rings must be at least 1");
        }
        if self.num_sectors < 2 {
            return bad("num_sectors must be at least 2");
        }
        if !(self.max_range > 0.0) {
            return bad("max_range must be positive");
        }
        if self.min_cell_points < 4 {
            return bad("min_cell_points must be at least 4");
        }
        if !(self.downsample_leaf >= 0.0) {
            return bad("downsample_leaf must be non-negative");
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.num_rings * self.encoding.blocks()
    }

    /// `(ring, sector)` of a point; out-of-range radii clamp to the last ring.
    #[inline]
    pub fn cell_of(&self, p: &Point3) -> (usize, usize) {
        let rho = p.planar_range();
        let ring =
            ((rho * self.num_rings as f64 / self.max_range) as usize).min(self.num_rings - 1);
        let mut theta = p.y.atan2(p.x);
        if theta < 0.0 {
            theta += TAU;
        }
        let sector = ((theta * self.num_sectors as f64 / TAU) as usize).min(self.num_sectors - 1);
        (ring, sector)
    }
}

/// Gaussian fit of one cell with its regularized covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct CellStats {
    pub mean: Vector3<f64>,
    /// Regularized covariance.
    pub covariance: Matrix3<f64>,
    pub count: usize,
    /// Regularized eigenvalues, ascending.
    pub eigenvalues: Vector3<f64>,
    inverse: Matrix3<f64>,
    log_det: f64,
}

impl CellStats {
    pub fn inverse(&self) -> &Matrix3<f64> {
        &self.inverse
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }
}

/// Splits a cloud into the `num_rings x num_sectors` grid, ring-major.
pub fn partition_cells(cloud: &PointCloud, cfg: &DescriptorConfig) -> Vec<Vec<Point3>> {
    let mut cells = vec![Vec::new(); cfg.num_rings * cfg.num_sectors];
    for p in &cloud.points {
        let (r, s) = cfg.cell_of(p);
        cells[r * cfg.num_sectors + s].push(*p);
    }
    cells
}

/// Sample mean and `1/(N-1)` covariance, eigenvalue-floored at
/// [`EIGEN_FLOOR_RATIO`] of the largest eigenvalue. `None` for cells that are
/// too sparse or collapsed to a point.
pub fn cell_gaussian(points: &[Point3], min_cell_points: usize) -> Option<CellStats> {
    let n = points.len();
    if n < min_cell_points || n < 2 {
        return None;
    }
    let mean = points
        .iter()
        .fold(Vector3::zeros(), |acc, p| acc + p.coords())
        / n as f64;
    let mut cov = Matrix3::<f64>::zeros();
    for p in points {
        let d = p.coords() - mean;
        cov += d * d.transpose();
    }
    cov /= (n - 1) as f64;

    let eig = SymmetricEigen::new(cov);
    let lambda_max = eig.eigenvalues.max();
    if !(lambda_max > MIN_EIGENVALUE) {
        return None;
    }
    let floor = EIGEN_FLOOR_RATIO * lambda_max;
    let mut vals = eig.eigenvalues.map(|l| l.max(floor));
    let mut vecs = eig.eigenvectors;
    // ascending order for stable reporting
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
    vals = Vector3::new(vals[order[0]], vals[order[1]], vals[order[2]]);
    vecs = Matrix3::from_columns(&[
        vecs.column(order[0]).into_owned(),
        vecs.column(order[1]).into_owned(),
        vecs.column(order[2]).into_owned(),
    ]);
    let covariance = vecs * Matrix3::from_diagonal(&vals) * vecs.transpose();
    let inverse = vecs * Matrix3::from_diagonal(&vals.map(|l| 1.0 / l)) * vecs.transpose();
    let log_det = vals.iter().map(|l| l.ln()).sum();
    Some(CellStats {
        mean,
        covariance: 0.5 * (covariance + covariance.transpose()),
        count: n,
        eigenvalues: vals,
        inverse: 0.5 * (inverse + inverse.transpose()),
        log_det,
    })
}

/// Sum of `exp(-d^2 / 2)` over the cell's points, `d` the Mahalanobis
/// distance under the regularized covariance.
pub fn density_score(points: &[Point3], stats: &CellStats) -> f64 {
    points
        .iter()
        .map(|p| {
            let d = p.coords() - stats.mean;
            let m2 = d.dot(&(stats.inverse * d));
            (-0.5 * m2).exp()
        })
        .sum()
}

/// Differential entropy of the fitted Gaussian, in nats.
pub fn cell_entropy(stats: &CellStats) -> f64 {
    gaussian_entropy(stats.log_det)
}

/// `(d/2)(ln 2pi + 1) + ln|Sigma| / 2` for `d = 3`.
pub fn gaussian_entropy(log_det: f64) -> f64 {
    0.5 * DIM * ((2.0 * PI).ln() + 1.0) + 0.5 * log_det
}

/// Highest `z` among the points, `0` for an empty cell.
pub fn max_height(points: &[Point3]) -> f64 {
    points.iter().map(|p| p.z).reduce(f64::max).unwrap_or(0.0)
}

/// Row-major dense matrix plus the grid geometry it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Descriptor {
    num_rings: usize,
    num_sectors: usize,
    encoding: Encoding,
    data: Vec<f64>,
}

impl Descriptor {
    pub fn zeros(num_rings: usize, num_sectors: usize, encoding: Encoding) -> Self {
        Descriptor {
            num_rings,
            num_sectors,
            encoding,
            data: vec![0.0; num_rings * encoding.blocks() * num_sectors],
        }
    }

    /// Wraps a row-major buffer of `rows() * num_sectors` values.
    pub fn from_data(
        num_rings: usize,
        num_sectors: usize,
        encoding: Encoding,
        data: Vec<f64>,
    ) -> Result<Self> {
        let expected = num_rings * encoding.blocks() * num_sectors;
        if data.len() != expected {
            return Err(NddError::InvalidConfig(format!(
                "descriptor buffer holds {} values, expected {expected}",
                data.len()
            )));
        }
        Ok(Descriptor {
            num_rings,
            num_sectors,
            encoding,
            data,
        })
    }

    pub fn num_rings(&self) -> usize {
        self.num_rings
    }

    pub fn num_sectors(&self) -> usize {
        self.num_sectors
    }

    pub fn encoding(&self) -> Encoding {
        self.encoding
    }

    pub fn rows(&self) -> usize {
        self.num_rings * self.encoding.blocks()
    }

    pub fn cols(&self) -> usize {
        self.num_sectors
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows(), self.cols())
    }

    /// Row-major stacked matrix.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.num_sectors + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.num_sectors + col] = value;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.num_sectors..(row + 1) * self.num_sectors]
    }

    /// Density-score block of a two-scale descriptor.
    pub fn density_block(&self) -> Option<&[f64]> {
        match self.encoding {
            Encoding::PPlusE | Encoding::P => Some(&self.data[..self.num_rings * self.num_sectors]),
            _ => None,
        }
    }

    pub fn entropy_block(&self) -> Option<&[f64]> {
        let block = self.num_rings * self.num_sectors;
        match self.encoding {
            Encoding::PPlusE => Some(&self.data[block..]),
            Encoding::E => Some(&self.data[..]),
            _ => None,
        }
    }

    /// Circular column shift: column `j` moves to `(j + shift) mod cols`.
    pub fn shift_columns(&self, shift: usize) -> Descriptor {
        let cols = self.num_sectors;
        let shift = shift % cols;
        let mut data = vec![0.0; self.data.len()];
        for (src, dst) in self
            .data
            .chunks_exact(cols)
            .zip(data.chunks_exact_mut(cols))
        {
            dst[shift..].copy_from_slice(&src[..cols - shift]);
            dst[..shift].copy_from_slice(&src[cols - shift..]);
        }
        Descriptor { data, ..*self }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Descriptor {
        Descriptor {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn search_key(&self) -> SearchKey {
        search_key(self)
    }

    pub fn align_key(&self) -> AlignKey {
        align_key(self)
    }

    /// Little-endian binary layout:
    ///
    /// ```text
    /// offset  size  field
    ///      0     4  magic b"NDD1"
    ///      4     4  num_rings   (u32)
    ///      8     4  num_sectors (u32)
    ///     12     1  encoding tag (0=P, 1=E, 2=H, 3=P+E)
    ///     13     3  reserved, zero
    ///     16   8*n  f64 values, row-major, n = rows * num_sectors
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.data.len());
        out.extend_from_slice(BINARY_MAGIC);
        out.extend_from_slice(&(self.num_rings as u32).to_le_bytes());
        out.extend_from_slice(&(self.num_sectors as u32).to_le_bytes());
        out.extend_from_slice(&[self.encoding.tag(), 0, 0, 0]);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Descriptor, String> {
        if bytes.len() < 16 || &bytes[..4] != BINARY_MAGIC {
            return Err("missing NDD1 header".into());
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let num_rings = u32_at(4);
        let num_sectors = u32_at(8);
        let encoding = Encoding::from_tag(bytes[12])
            .ok_or_else(|| format!("unknown encoding tag {}", bytes[12]))?;
        let n = num_rings * encoding.blocks() * num_sectors;
        if bytes.len() != 16 + 8 * n {
            return Err(format!(
                "expected {} bytes for a {num_rings}x{num_sectors} {encoding} descriptor, found {}",
                16 + 8 * n,
                bytes.len()
            ));
        }
        let data = bytes[16..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Descriptor {
            num_rings,
            num_sectors,
            encoding,
            data,
        })
    }

    /// CSV dump: a `# nr=..,ns=..,encoding=..` comment line, then one matrix
    /// row per line with shortest round-trip decimal formatting.
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# nr={},ns={},encoding={}\n",
            self.num_rings, self.num_sectors, self.encoding
        );
        for r in 0..self.rows() {
            let row: Vec<String> = self.row(r).iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> std::result::Result<Descriptor, String> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .and_then(|l| l.strip_prefix("# "))
            .ok_or("missing '# nr=..' header")?;
        let (mut nr, mut ns, mut enc) = (None, None, None);
        for kv in header.split(',') {
            match kv.split_once('=') {
                Some(("nr", v)) => nr = v.parse::<usize>().ok(),
                Some(("ns", v)) => ns = v.parse::<usize>().ok(),
                Some(("encoding", v)) => enc = v.parse::<Encoding>().ok(),
                _ => return Err(format!("bad header field '{kv}'")),
            }
        }
        let (nr, ns, enc) = match (nr, ns, enc) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => return Err("incomplete header".into()),
        };
        let mut data = Vec::with_capacity(nr * enc.blocks() * ns);
        for (i, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
            let before = data.len();
            for tok in line.split(',') {
                data.push(
                    tok.trim()
                        .parse::<f64>()
                        .map_err(|e| format!("row {i}: {e}"))?,
                );
            }
            if data.len() - before != ns {
                return Err(format!(
                    "row {i} has {} values, expected {ns}",
                    data.len() - before
                ));
            }
        }
        Descriptor::from_data(nr, ns, enc, data).map_err(|e| e.to_string())
    }

    pub fn write_binary(&self, path: impl AsRef<Path>) -> Result<()> {
        pointcloud::write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn read_binary(path: impl AsRef<Path>) -> Result<Descriptor> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| NddError::io(path, e))?;
        Descriptor::from_bytes(&bytes).map_err(|r| NddError::malformed(path, r))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        pointcloud::write_atomic(path.as_ref(), self.to_csv().as_bytes())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Descriptor> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| NddError::io(path, e))?;
        Descriptor::from_csv(&text).map_err(|r| NddError::malformed(path, r))
    }
}

const BINARY_MAGIC: &[u8; 4] = b"NDD1";

/// Row sums of the stacked descriptor, used as the KD-tree key.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchKey(pub Vec<f64>);

/// Column sums of the stacked descriptor, used for shift alignment.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignKey(pub Vec<f64>);

pub fn search_key(desc: &Descriptor) -> SearchKey {
    SearchKey(
        desc.data
            .chunks_exact(desc.num_sectors)
            .map(|row| row.iter().sum())
            .collect(),
    )
}

pub fn align_key(desc: &Descriptor) -> AlignKey {
    let mut sums = vec![0.0; desc.num_sectors];
    for row in desc.data.chunks_exact(desc.num_sectors) {
        for (s, v) in sums.iter_mut().zip(row) {
            *s += v;
        }
    }
    AlignKey(sums)
}

/// Downsample, range-filter and (optionally) PCA-align a raw scan.
pub fn preprocess(cloud: &PointCloud, cfg: &DescriptorConfig) -> PointCloud {
    let sampled;
    let cloud = if cfg.downsample_leaf > 0.0 {
        sampled = pointcloud::voxel_downsample(cloud, cfg.downsample_leaf);
        &sampled
    } else {
        cloud
    };
    let filtered = pointcloud::range_filter(cloud, cfg.max_range);
    if cfg.pca_enabled {
        if let Ok(aligned) = pointcloud::pca_align(&filtered) {
            return aligned;
        }
    }
    filtered
}

/// Encodes an already preprocessed cloud.
pub fn encode_cells(cloud: &PointCloud, cfg: &DescriptorConfig) -> Descriptor {
    let cells = partition_cells(cloud, cfg);
    let (nr, ns) = (cfg.num_rings, cfg.num_sectors);
    let mut desc = Descriptor::zeros(nr, ns, cfg.encoding);
    for (idx, points) in cells.iter().enumerate() {
        let (ring, sector) = (idx / ns, idx % ns);
        if cfg.encoding == Encoding::H {
            desc.set(ring, sector, max_height(points));
            continue;
        }
        let Some(stats) = cell_gaussian(points, cfg.min_cell_points) else {
            continue;
        };
        match cfg.encoding {
            Encoding::P => desc.set(ring, sector, density_score(points, &stats)),
            Encoding::E => desc.set(ring, sector, cell_entropy(&stats)),
            Encoding::PPlusE => {
                desc.set(ring, sector, density_score(points, &stats));
                desc.set(nr + ring, sector, cell_entropy(&stats));
            }
            Encoding::H => unreachable!(),
        }
    }
    desc
}

/// Full descriptor pipeline for one raw scan.
pub fn build_descriptor(cloud: &PointCloud, cfg: &DescriptorConfig) -> Descriptor {
    encode_cells(&preprocess(cloud, cfg), cfg)
}

/// Builds descriptors for a batch of scans, in parallel when enabled.
pub fn build_descriptors(clouds: &[PointCloud], cfg: &DescriptorConfig) -> Vec<Descriptor> {
    crate::par::map(clouds, |c| build_descriptor(c, cfg))
}
