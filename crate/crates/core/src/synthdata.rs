//! Seeded Perturb-seq-like benchmark in which a perturbation's effect
//! depends on which latent pathways are active in the cell type.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{config, contract, Error, Result};
use crate::io::{read_json, sha256_hex, write_atomic, write_json};
use crate::retrieval::{read_embeddings_csv, write_embeddings_csv, PerturbationDb};
use crate::rng::SplitMix64;

pub const MANIFEST_SCHEMA: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    #[serde(rename = "G")]
    pub genes: usize,
    #[serde(rename = "E")]
    pub embed_dim: usize,
    #[serde(rename = "P")]
    pub num_perturbations: usize,
    #[serde(rename = "C")]
    pub cell_types: usize,
    /// Latent pathways.
    pub m: usize,
    /// Cells per population.
    #[serde(rename = "S")]
    pub cells: usize,
    pub noise_sigma: f64,
    /// Active pathways per cell type.
    pub active_pathways: usize,
    /// Scale of the per-type deviation added to the shared signatures.
    pub signature_variation: f64,
    /// Fraction of genes each pathway touches.
    pub signature_density: f64,
    pub effect_scale: f64,
    pub nuisance_scale: f64,
    pub baseline_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            genes: 60,
            embed_dim: 32,
            num_perturbations: 120,
            cell_types: 4,
            m: 8,
            cells: 16,
            noise_sigma: 0.3,
            active_pathways: 4,
            signature_variation: 0.5,
            signature_density: 0.3,
            effect_scale: 1.0,
            nuisance_scale: 0.5,
            baseline_scale: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    /// Default sizes with small effects over a dominant per-type baseline,
    /// so that only a few retrieved neighbors carry usable signal.
    pub fn benchmark() -> Self {
        SyntheticConfig {
            noise_sigma: 0.063,
            effect_scale: 0.07,
            baseline_scale: 0.21,
            ..SyntheticConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("G", self.genes),
            ("E", self.embed_dim),
            ("P", self.num_perturbations),
            ("C", self.cell_types),
            ("m", self.m),
            ("S", self.cells),
        ] {
            if v == 0 {
                return Err(config(key, ">= 1"));
            }
        }
        if self.m > self.embed_dim {
            return Err(config("m", format!("<= E = {}", self.embed_dim)));
        }
        if self.num_perturbations < 2 {
            return Err(config("P", ">= 2"));
        }
        if self.active_pathways == 0 || self.active_pathways > self.m {
            return Err(config(
                "active_pathways",
                format!("1 <= active_pathways <= m = {}", self.m),
            ));
        }
        if !(0.0..=1.0).contains(&self.signature_density) || self.signature_density == 0.0 {
            return Err(config("signature_density", "0 < signature_density <= 1"));
        }
        for (key, v) in [
            ("noise_sigma", self.noise_sigma),
            ("signature_variation", self.signature_variation),
            ("effect_scale", self.effect_scale),
            ("nuisance_scale", self.nuisance_scale),
            ("baseline_scale", self.baseline_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(config(key, ">= 0"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One (perturbation, cell type) population pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub pert_id: String,
    /// Row of the perturbation in the database.
    pub pert_index: usize,
    pub cell_type: String,
    pub x_ctrl: Tensor,
    pub x_pert: Tensor,
    pub split: Split,
}

/// Generator internals; `delta` is the noiseless response.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// `[C x G]` control means.
    pub means: Tensor,
    /// Per cell type, `[m x G]` pathway signatures.
    pub signatures: Vec<Tensor>,
    /// `[P x m]` pathway loadings.
    pub loadings: Tensor,
    /// `[P x (E - m)]` nuisance embedding block.
    pub nuisance: Tensor,
    /// Per cell type, 0/1 pathway mask of length `m`.
    pub masks: Vec<Vec<f64>>,
}

impl GroundTruth {
    /// `(b_c ⊙ v) A_c` for an explicit loading vector.
    pub fn delta_for(&self, loading: &[f64], cell_type: usize) -> Vec<f64> {
        let a = &self.signatures[cell_type];
        let b = &self.masks[cell_type];
        let mut out = vec![0.0; a.cols()];
        for (j, (&v, &bit)) in loading.iter().zip(b).enumerate() {
            let w = v * bit;
            if w == 0.0 {
                continue;
            }
            for (o, &s) in out.iter_mut().zip(a.row(j)) {
                *o += w * s;
            }
        }
        out
    }

    pub fn delta(&self, pert: usize, cell_type: usize) -> Vec<f64> {
        self.delta_for(self.loadings.row(pert), cell_type)
    }

    /// `[P x E]` embeddings `[v_p ; r_p]`.
    pub fn embeddings(&self) -> Tensor {
        let (p, m) = (self.loadings.rows(), self.loadings.cols());
        let e = m + self.nuisance.cols();
        let mut data = Vec::with_capacity(p * e);
        for i in 0..p {
            data.extend_from_slice(self.loadings.row(i));
            data.extend_from_slice(self.nuisance.row(i));
        }
        Tensor::matrix(p, e, data).expect("shape")
    }

    /// Control cells around the type mean, and perturbed cells
    /// `control + delta + noise`.
    pub fn sample_population(
        &self,
        delta: &[f64],
        cell_type: usize,
        cells: usize,
        sigma: f64,
        rng: &mut SplitMix64,
    ) -> (Tensor, Tensor) {
        let mu = self.means.row(cell_type);
        let g = mu.len();
        let mut ctrl = Vec::with_capacity(cells * g);
        let mut pert = Vec::with_capacity(cells * g);
        for _ in 0..cells {
            for j in 0..g {
                let c = mu[j] + sigma * normal(rng);
                ctrl.push(c);
                pert.push(c + delta[j] + sigma * normal(rng));
            }
        }
        (
            Tensor::matrix(cells, g, ctrl).expect("shape"),
            Tensor::matrix(cells, g, pert).expect("shape"),
        )
    }
}

fn normal(rng: &mut SplitMix64) -> f64 {
    StandardNormal.sample(rng)
}

fn normal_matrix(rows: usize, cols: usize, scale: f64, rng: &mut SplitMix64) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| scale * normal(rng)).collect(),
    )
    .expect("shape")
}

pub fn perturbation_id(i: usize) -> String {
    format!("P{i:04}")
}

pub fn cell_type_name(i: usize) -> String {
    format!("type{i}")
}

/// Generated benchmark.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: SyntheticConfig,
    pub cell_types: Vec<String>,
    /// Ordered by cell type, then perturbation.
    pub samples: Vec<Sample>,
    pub target_cell_type: Option<String>,
    /// `[P x E]` embeddings before normalization, in database order.
    pub raw_embeddings: Tensor,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].split == split)
            .collect()
    }

    /// Perturbation ids per split for the target cell type.
    pub fn split_assignments(&self) -> BTreeMap<String, BTreeSet<String>> {
        let mut out: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for s in &self.samples {
            if Some(&s.cell_type) == self.target_cell_type.as_ref() {
                out.entry(s.split.name().to_string())
                    .or_default()
                    .insert(s.pert_id.clone());
            }
        }
        out
    }
}

/// Builds the dataset, the perturbation database and the ground truth.
/// Every sample starts in the training split.
pub fn generate(cfg: &SyntheticConfig) -> Result<(Dataset, PerturbationDb, GroundTruth)> {
    cfg.validate()?;
    let (g, m, p, c) = (cfg.genes, cfg.m, cfg.num_perturbations, cfg.cell_types);
    let mut rng = SplitMix64::derive(cfg.seed, 1);

    let shared_mean = normal_matrix(1, g, cfg.baseline_scale, &mut rng);
    let mut means = normal_matrix(c, g, cfg.baseline_scale, &mut rng);
    for (i, v) in means.data_mut().iter_mut().enumerate() {
        *v += shared_mean.data()[i % g];
    }

    let mut rng = SplitMix64::derive(cfg.seed, 2);
    let membership: Vec<f64> = (0..m * g)
        .map(|_| {
            if rng.next_f64() < cfg.signature_density {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let shared = normal_matrix(m, g, 1.0, &mut rng);
    let signatures = (0..c)
        .map(|_| {
            let dev = normal_matrix(m, g, cfg.signature_variation, &mut rng);
            let data = (0..m * g)
                .map(|i| membership[i] * (shared.data()[i] + dev.data()[i]))
                .collect();
            Tensor::matrix(m, g, data).expect("shape")
        })
        .collect();

    let mut rng = SplitMix64::derive(cfg.seed, 3);
    let loadings = normal_matrix(p, m, cfg.effect_scale, &mut rng);
    let nuisance = normal_matrix(p, cfg.embed_dim - m, cfg.nuisance_scale, &mut rng);

    let mut rng = SplitMix64::derive(cfg.seed, 4);
    let masks = (0..c)
        .map(|_| {
            let mut order: Vec<usize> = (0..m).collect();
            rng.shuffle(&mut order);
            let mut bits = vec![0.0; m];
            for &j in &order[..cfg.active_pathways] {
                bits[j] = 1.0;
            }
            bits
        })
        .collect();

    let truth = GroundTruth {
        means,
        signatures,
        loadings,
        nuisance,
        masks,
    };
    let ids: Vec<String> = (0..p).map(perturbation_id).collect();
    let raw_embeddings = truth.embeddings();
    let db = PerturbationDb::build(ids.clone(), &raw_embeddings)?;

    let mut rng = SplitMix64::derive(cfg.seed, 5);
    let cell_types: Vec<String> = (0..c).map(cell_type_name).collect();
    let mut samples = Vec::with_capacity(c * p);
    for (ci, name) in cell_types.iter().enumerate() {
        for (pi, id) in ids.iter().enumerate() {
            let delta = truth.delta(pi, ci);
            let (x_ctrl, x_pert) =
                truth.sample_population(&delta, ci, cfg.cells, cfg.noise_sigma, &mut rng);
            samples.push(Sample {
                pert_id: id.clone(),
                pert_index: pi,
                cell_type: name.clone(),
                x_ctrl,
                x_pert,
                split: Split::Train,
            });
        }
    }
    let dataset = Dataset {
        config: cfg.clone(),
        cell_types,
        samples,
        target_cell_type: None,
        raw_embeddings,
    };
    Ok((dataset, db, truth))
}

/// Few-shot cross-cell-type protocol: every non-target sample trains; a
/// `floor(fewshot_fraction * n)` subset of the target's perturbations
/// trains; the rest goes to validation (`floor(val_fraction * rest)`) and
/// test. Shuffling uses SplitMix64 seeded with `seed`.
pub fn split_fewshot(
    dataset: &mut Dataset,
    target_cell_type: &str,
    fewshot_fraction: f64,
    val_fraction: f64,
    seed: u64,
) -> Result<()> {
    if !(fewshot_fraction > 0.0 && fewshot_fraction < 1.0) {
        return Err(config("fewshot_fraction", "0 < fewshot_fraction < 1"));
    }
    if !(0.0..=1.0).contains(&val_fraction) {
        return Err(config("val_fraction", "0 <= val_fraction <= 1"));
    }
    if !dataset.cell_types.iter().any(|c| c == target_cell_type) {
        return Err(contract(format!(
            "target cell type `{target_cell_type}` is not in the dataset"
        )));
    }
    let mut perts: Vec<String> = dataset
        .samples
        .iter()
        .filter(|s| s.cell_type == target_cell_type)
        .map(|s| s.pert_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    SplitMix64::new(seed).shuffle(&mut perts);
    let n = perts.len();
    let n_train = (fewshot_fraction * n as f64).floor() as usize;
    let n_val = (val_fraction * (n - n_train) as f64).floor() as usize;
    let mut assignment: BTreeMap<&str, Split> = BTreeMap::new();
    for (i, id) in perts.iter().enumerate() {
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        assignment.insert(id, split);
    }
    for s in &mut dataset.samples {
        s.split = if s.cell_type == target_cell_type {
            assignment[s.pert_id.as_str()]
        } else {
            Split::Train
        };
    }
    dataset.target_cell_type = Some(target_cell_type.to_string());
    Ok(())
}

pub const BENCHMARK_SCHEMA: u32 = 1;

fn default_benchmark_schema() -> u32 {
    BENCHMARK_SCHEMA
}

/// Generator settings plus the few-shot split applied to them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    #[serde(default = "default_benchmark_schema")]
    pub schema_version: u32,
    pub synthetic: SyntheticConfig,
    pub target_cell_type: String,
    pub fewshot_fraction: f64,
    /// Share of the held-out target perturbations used for validation.
    pub val_fraction: f64,
    pub split_seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            schema_version: BENCHMARK_SCHEMA,
            synthetic: SyntheticConfig::benchmark(),
            target_cell_type: cell_type_name(0),
            fewshot_fraction: 0.3,
            val_fraction: 0.5,
            split_seed: 0,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != BENCHMARK_SCHEMA {
            return Err(config("schema_version", format!("== {BENCHMARK_SCHEMA}")));
        }
        self.synthetic.validate()?;
        if !(self.fewshot_fraction > 0.0 && self.fewshot_fraction < 1.0) {
            return Err(config("fewshot_fraction", "0 < fewshot_fraction < 1"));
        }
        if !(0.0..=1.0).contains(&self.val_fraction) {
            return Err(config("val_fraction", "0 <= val_fraction <= 1"));
        }
        Ok(())
    }

    /// Generates and splits the dataset.
    pub fn build(&self) -> Result<(Dataset, PerturbationDb)> {
        self.validate()?;
        let (mut dataset, db, _) = generate(&self.synthetic)?;
        split_fewshot(
            &mut dataset,
            &self.target_cell_type,
            self.fewshot_fraction,
            self.val_fraction,
            self.split_seed,
        )?;
        Ok((dataset, db))
    }
}

/// Dataset manifest: config echo, split assignments and file checksums.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub config: SyntheticConfig,
    pub cell_types: Vec<String>,
    pub target_cell_type: Option<String>,
    /// `"cell_type/pert_id"` -> split.
    pub splits: BTreeMap<String, Split>,
    /// File name -> SHA-256.
    pub checksums: BTreeMap<String, String>,
}

pub const CTRL_FILE: &str = "ctrl.csv";
pub const PERT_FILE: &str = "pert.csv";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

fn matrix_csv(dataset: &Dataset, pick: impl Fn(&Sample) -> &Tensor) -> Result<Vec<u8>> {
    let g = dataset.config.genes;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![
        "cell_type".to_string(),
        "pert_id".to_string(),
        "cell".to_string(),
    ];
    header.extend((0..g).map(|j| format!("g{j}")));
    w.write_record(&header)?;
    for s in &dataset.samples {
        let t = pick(s);
        for r in 0..t.rows() {
            let mut rec = vec![s.cell_type.clone(), s.pert_id.clone(), r.to_string()];
            rec.extend(t.row(r).iter().map(|v| format!("{v:?}")));
            w.write_record(&rec)?;
        }
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Writes the CSVs, the embeddings and the manifest into `dir`.
pub fn write_dataset(dir: &Path, dataset: &Dataset, db: &PerturbationDb) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let mut checksums = BTreeMap::new();
    for (name, bytes) in [
        (CTRL_FILE, matrix_csv(dataset, |s| &s.x_ctrl)?),
        (PERT_FILE, matrix_csv(dataset, |s| &s.x_pert)?),
    ] {
        write_atomic(&dir.join(name), &bytes)?;
        checksums.insert(name.to_string(), sha256_hex(&bytes));
    }
    let emb_path = dir.join(EMBEDDINGS_FILE);
    write_embeddings_csv(&emb_path, db.ids(), &dataset.raw_embeddings)?;
    checksums.insert(
        EMBEDDINGS_FILE.to_string(),
        sha256_hex(&std::fs::read(&emb_path)?),
    );
    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA,
        config: dataset.config.clone(),
        cell_types: dataset.cell_types.clone(),
        target_cell_type: dataset.target_cell_type.clone(),
        splits: dataset
            .samples
            .iter()
            .map(|s| (format!("{}/{}", s.cell_type, s.pert_id), s.split))
            .collect(),
        checksums,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

fn read_matrix_csv(path: &Path, genes: usize) -> Result<BTreeMap<(String, String), Vec<Vec<f64>>>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out: BTreeMap<(String, String), Vec<Vec<f64>>> = BTreeMap::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != genes + 3 {
            return Err(contract(format!(
                "{}: expected {} columns, got {}",
                path.display(),
                genes + 3,
                rec.len()
            )));
        }
        let row = rec
            .iter()
            .skip(3)
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|e| contract(format!("{}: bad value `{v}`: {e}", path.display())))
            })
            .collect::<Result<Vec<f64>>>()?;
        out.entry((rec[0].to_string(), rec[1].to_string()))
            .or_default()
            .push(row);
    }
    Ok(out)
}

/// Reads a dataset written by [`write_dataset`], verifying checksums.
pub fn read_dataset(dir: &Path) -> Result<(Dataset, PerturbationDb, Manifest)> {
    let manifest: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
    if manifest.schema_version != MANIFEST_SCHEMA {
        return Err(contract(format!(
            "unsupported manifest schema {}",
            manifest.schema_version
        )));
    }
    for (name, sum) in &manifest.checksums {
        let actual = sha256_hex(&std::fs::read(dir.join(name))?);
        if &actual != sum {
            return Err(contract(format!("checksum mismatch for {name}")));
        }
    }
    let g = manifest.config.genes;
    let (ids, raw_embeddings) = read_embeddings_csv(&dir.join(EMBEDDINGS_FILE))?;
    let db = PerturbationDb::build(ids, &raw_embeddings)?;
    let mut ctrl = read_matrix_csv(&dir.join(CTRL_FILE), g)?;
    let mut pert = read_matrix_csv(&dir.join(PERT_FILE), g)?;
    let mut samples = Vec::with_capacity(manifest.splits.len());
    for ct in &manifest.cell_types {
        for id in db.ids() {
            let key = (ct.clone(), id.clone());
            let (Some(c), Some(p)) = (ctrl.remove(&key), pert.remove(&key)) else {
                return Err(contract(format!("missing population {ct}/{id}")));
            };
            let split = *manifest
                .splits
                .get(&format!("{ct}/{id}"))
                .ok_or_else(|| contract(format!("no split for {ct}/{id}")))?;
            samples.push(Sample {
                pert_id: id.clone(),
                pert_index: db.index_of(id)?,
                cell_type: ct.clone(),
                x_ctrl: Tensor::from_rows(&c)?,
                x_pert: Tensor::from_rows(&p)?,
                split,
            });
        }
    }
    let dataset = Dataset {
        config: manifest.config.clone(),
        cell_types: manifest.cell_types.clone(),
        samples,
        target_cell_type: manifest.target_cell_type.clone(),
        raw_embeddings,
    };
    Ok((dataset, db, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::energy_distance;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            genes: 12,
            embed_dim: 6,
            num_perturbations: 10,
            cell_types: 3,
            m: 3,
            cells: 5,
            active_pathways: 2,
            ..Default::default()
        }
    }

    #[test]
    fn null_perturbation_without_noise() {
        let (_, _, truth) = generate(&small()).unwrap();
        let zero = vec![0.0; 3];
        let delta = truth.delta_for(&zero, 1);
        let (c, p) = truth.sample_population(&delta, 1, 4, 0.0, &mut SplitMix64::new(0));
        assert_eq!(c, p);
    }

    #[test]
    fn nuisance_block_is_inert() {
        let (_, _, mut truth) = generate(&small()).unwrap();
        let v = truth.loadings.row(0).to_vec();
        truth.loadings.data_mut()[3..6].copy_from_slice(&v);
        assert_ne!(truth.nuisance.row(0), truth.nuisance.row(1));
        assert_eq!(truth.delta(0, 2), truth.delta(1, 2));
        let mut rng = SplitMix64::new(1);
        let (_, a) = truth.sample_population(&truth.delta(0, 2), 2, 3, 0.0, &mut rng);
        let (_, b) = truth.sample_population(&truth.delta(1, 2), 2, 3, 0.0, &mut rng);
        assert_eq!(a.mean_rows(), b.mean_rows());
    }

    #[test]
    fn degenerate_masks_remove_cell_type_dependence() {
        let cfg = SyntheticConfig {
            active_pathways: 3,
            signature_variation: 0.0,
            ..small()
        };
        let (_, _, truth) = generate(&cfg).unwrap();
        for p in 0..10 {
            assert_eq!(truth.delta(p, 0), truth.delta(p, 1));
            assert_eq!(truth.delta(p, 0), truth.delta(p, 2));
        }
    }

    #[test]
    fn masked_coordinates_do_not_matter() {
        let (_, _, truth) = generate(&small()).unwrap();
        for c in 0..3 {
            for p in 0..10 {
                let zeroed: Vec<f64> = truth
                    .loadings
                    .row(p)
                    .iter()
                    .zip(&truth.masks[c])
                    .map(|(v, b)| v * b)
                    .collect();
                assert_eq!(truth.delta(p, c), truth.delta_for(&zeroed, c));
            }
        }
    }

    #[test]
    fn oracle_has_zero_energy_without_noise() {
        let cfg = SyntheticConfig {
            noise_sigma: 0.0,
            ..small()
        };
        let (data, _, truth) = generate(&cfg).unwrap();
        for s in data.samples.iter().take(6) {
            let c = data
                .cell_types
                .iter()
                .position(|x| x == &s.cell_type)
                .unwrap();
            let delta = truth.delta(s.pert_index, c);
            let mut oracle = s.x_ctrl.clone();
            let g = oracle.cols();
            for (i, v) in oracle.data_mut().iter_mut().enumerate() {
                *v += delta[i % g];
            }
            assert_eq!(energy_distance(&oracle, &s.x_pert).unwrap(), 0.0);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let (a, db_a, _) = generate(&small()).unwrap();
        let (b, db_b, _) = generate(&small()).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(db_a.embeddings(), db_b.embeddings());
        assert!(a
            .samples
            .iter()
            .all(|s| s.x_ctrl.is_finite() && s.x_pert.is_finite()));
    }

    #[test]
    fn embeddings_carry_loadings() {
        let (_, _, truth) = generate(&small()).unwrap();
        let e = truth.embeddings();
        assert_eq!(&e.row(4)[..3], truth.loadings.row(4));
        assert_eq!(&e.row(4)[3..], truth.nuisance.row(4));
    }

    #[test]
    fn fewshot_counts_and_rounding() {
        let cfg = SyntheticConfig {
            num_perturbations: 100,
            ..small()
        };
        let (mut data, _, _) = generate(&cfg).unwrap();
        split_fewshot(&mut data, "type2", 0.3, 0.5, 9).unwrap();
        let a = data.split_assignments();
        assert_eq!(a["train"].len(), 30);
        assert_eq!(a["val"].len() + a["test"].len(), 70);
        assert_eq!(a["val"].len(), 35);
        assert!(data
            .samples
            .iter()
            .filter(|s| s.cell_type != "type2")
            .all(|s| s.split == Split::Train));

        let cfg = SyntheticConfig {
            num_perturbations: 33,
            ..small()
        };
        let (mut data, _, _) = generate(&cfg).unwrap();
        split_fewshot(&mut data, "type0", 0.3, 0.5, 9).unwrap();
        assert_eq!(data.split_assignments()["train"].len(), 9);
    }

    #[test]
    fn fewshot_is_disjoint_and_deterministic() {
        let (mut a, _, _) = generate(&small()).unwrap();
        let mut b = a.clone();
        split_fewshot(&mut a, "type1", 0.3, 0.5, 4).unwrap();
        split_fewshot(&mut b, "type1", 0.3, 0.5, 4).unwrap();
        assert_eq!(a.split_assignments(), b.split_assignments());
        let sets = a.split_assignments();
        let all: Vec<&String> = sets.values().flatten().collect();
        let unique: BTreeSet<&String> = all.iter().copied().collect();
        assert_eq!(all.len(), unique.len());
        assert!(split_fewshot(&mut a, "nope", 0.3, 0.5, 4).is_err());
        assert!(matches!(
            split_fewshot(&mut a, "type1", 1.0, 0.5, 4),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn config_checks() {
        assert!(generate(&SyntheticConfig { m: 7, ..small() }).is_err());
        assert!(generate(&SyntheticConfig {
            cells: 0,
            ..small()
        })
        .is_err());
        let d = SyntheticConfig::default();
        assert_eq!(
            (
                d.genes,
                d.embed_dim,
                d.num_perturbations,
                d.cell_types,
                d.m,
                d.cells
            ),
            (60, 32, 120, 4, 8, 16)
        );
    }

    #[test]
    fn benchmark_config() {
        let b = BenchmarkConfig::default();
        assert_eq!(b.synthetic, SyntheticConfig::benchmark());
        assert_eq!(b.target_cell_type, "type0");
        let json = serde_json::to_string(&b).unwrap();
        let back: BenchmarkConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, b);

        let small_bench = BenchmarkConfig { synthetic: small(), ..b.clone() };
        let (data, db) = small_bench.build().unwrap();
        let (mut direct, db2, _) = generate(&small()).unwrap();
        split_fewshot(&mut direct, "type0", 0.3, 0.5, 0).unwrap();
        assert_eq!(data.split_assignments(), direct.split_assignments());
        assert_eq!(db, db2);

        for bad in [
            BenchmarkConfig { schema_version: 9, ..b.clone() },
            BenchmarkConfig { fewshot_fraction: 0.0, ..b.clone() },
            BenchmarkConfig { val_fraction: 1.5, ..b.clone() },
        ] {
            assert!(matches!(bad.build(), Err(Error::Config { .. })));
        }
        assert!(BenchmarkConfig { target_cell_type: "nope".into(), ..b }.build().is_err());
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (mut data, db, _) = generate(&small()).unwrap();
        split_fewshot(&mut data, "type0", 0.3, 0.5, 2).unwrap();
        let m1 = write_dataset(dir.path(), &data, &db).unwrap();
        let (back, db2, m2) = read_dataset(dir.path()).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(back.samples, data.samples);
        assert_eq!(db2.embeddings(), db.embeddings());

        let dir2 = tempfile::tempdir().unwrap();
        let m3 = write_dataset(dir2.path(), &data, &db).unwrap();
        assert_eq!(m1.checksums, m3.checksums);

        std::fs::write(dir.path().join(CTRL_FILE), "tampered").unwrap();
        assert!(read_dataset(dir.path())
            .unwrap_err()
            .to_string()
            .contains("checksum"));
    }
}
