//! The training procedure: each epoch re-clusters first-branch features,
//! refines the clusters into pseudo labels, recomputes centers from both
//! banks, optimizes over shuffled mini-batches, updates the banks and
//! evaluates.

mod ablation;
mod checkpoint;
mod config;

pub use ablation::{ablation_csv, parse_row, run_ablation, summarize, AblationResult, AblationSummary};
pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use config::{lr_at, ClusterOn, TrainConfig, Variant, CONFIG_KEYS};

use log::{info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_basic, make_views, second_branch_plain, Image};
use crate::autodiff::{AdamConfig, AdamState, Tape, Tensor};
use crate::clustering::{assign_pseudo_labels, dbscan, pairwise_distance, refine, ClusterAssignment, PseudoLabels};
use crate::dataset::{Dataset, SplitTag};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalResult, RetrievalSet, Role};
use crate::loss::{compute_centers, total_loss, update_banks, BatchOutputs, ClusterContext, LossBreakdown, MemoryBank};
use crate::model::{images_to_input, EncoderArch, EncoderParams, Params, PredictorParams};
use crate::rng::{derive, seeded};

/// Feature extraction batch size; bounds tape memory only.
const EXTRACT_CHUNK: usize = 128;

/// `F`, `G`, `F'` and, for the symmetric variants, `G'`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub encoder: EncoderParams,
    pub predictor: PredictorParams,
    pub encoder2: EncoderParams,
    pub predictor2: Option<PredictorParams>,
}

impl Model {
    pub fn init(cfg: &TrainConfig, height: usize, width: usize) -> Result<Self> {
        let arch = EncoderArch::for_images(height, width, cfg.hidden.clone(), cfg.feature_dim);
        Ok(Model {
            encoder: EncoderParams::init(&arch, derive(cfg.seed, 10))?,
            predictor: PredictorParams::init(cfg.feature_dim, derive(cfg.seed, 11))?,
            encoder2: EncoderParams::init(&arch, derive(cfg.seed, 12))?,
            predictor2: if cfg.variant.symmetric() {
                Some(PredictorParams::init(cfg.feature_dim, derive(cfg.seed, 13))?)
            } else {
                None
            },
        })
    }

    /// All parameter tensors in optimizer order: `F`, `G`, `F'`, `G'`.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut t = self.encoder.tensors();
        t.extend(self.predictor.tensors());
        t.extend(self.encoder2.tensors());
        if let Some(p) = &self.predictor2 {
            t.extend(p.tensors());
        }
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut t = self.encoder.tensors_mut();
        t.extend(self.predictor.tensors_mut());
        t.extend(self.encoder2.tensors_mut());
        if let Some(p) = &mut self.predictor2 {
            t.extend(p.tensors_mut());
        }
        t
    }

    /// First-branch features of un-augmented images.
    pub fn features(&self, images: &[&Image]) -> Result<Tensor> {
        self.encoder.features_chunked(images, EXTRACT_CHUNK)
    }

    /// Second-branch features of the un-augmented second-branch input.
    pub fn features_second(&self, images: &[&Image], cfg: &TrainConfig) -> Result<Tensor> {
        let views: Vec<Image> = images.iter().map(|i| second_branch_plain(i, cfg.view_mode)).collect();
        let refs: Vec<&Image> = views.iter().collect();
        self.encoder2.features_chunked(&refs, EXTRACT_CHUNK)
    }

    /// Retrieval metrics of `F` and `F'` on the query/gallery split of `ds`.
    pub fn evaluate(&self, ds: &Dataset, cfg: &TrainConfig) -> Result<(EvalResult, EvalResult)> {
        let q = ds.indices(SplitTag::Query);
        let g = ds.indices(SplitTag::Gallery);
        if q.is_empty() || g.is_empty() {
            return Err(Error::InvalidArgument("dataset has no query/gallery split".into()));
        }
        let (qi, gi) = (ds.images(&q), ds.images(&g));
        let first = evaluate(
            &retrieval_set(ds, &q, self.features(&qi)?, Role::Query)?,
            &retrieval_set(ds, &g, self.features(&gi)?, Role::Gallery)?,
        )?;
        let second = evaluate(
            &retrieval_set(ds, &q, self.features_second(&qi, cfg)?, Role::Query)?,
            &retrieval_set(ds, &g, self.features_second(&gi, cfg)?, Role::Gallery)?,
        )?;
        Ok((first, second))
    }
}

/// Mean loss terms and gradient norms of one batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub epoch: usize,
    pub batch: usize,
    pub losses: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub num_clusters: usize,
    pub labeled_fraction: f64,
    /// Cluster terms were skipped because no sample carried a pseudo label.
    pub cluster_terms_skipped: bool,
    pub loss_instance: f64,
    pub loss_inter: f64,
    pub loss_intra: f64,
    pub loss_instance_sym: f64,
    pub loss_inter_sym: f64,
    pub loss_total: f64,
    pub grad_norm_first: f64,
    pub grad_norm_second: f64,
    /// Retrieval with `F`.
    pub eval: EvalResult,
    /// Retrieval with `F'`.
    pub eval_second: EvalResult,
    pub feature_std: f64,
    pub collapsed: bool,
}

pub const HISTORY_CSV_HEADER: &str = "epoch,lr,num_clusters,labeled_fraction,cluster_terms_skipped,\
loss_instance,loss_inter,loss_intra,loss_instance_sym,loss_inter_sym,loss_total,grad_norm_first,\
grad_norm_second,map,cmc1,cmc5,cmc10,map_second,cmc1_second,feature_std,collapsed";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.num_clusters,
            self.labeled_fraction,
            self.cluster_terms_skipped,
            self.loss_instance,
            self.loss_inter,
            self.loss_intra,
            self.loss_instance_sym,
            self.loss_inter_sym,
            self.loss_total,
            self.grad_norm_first,
            self.grad_norm_second,
            self.eval.map,
            self.eval.cmc1,
            self.eval.cmc5,
            self.eval.cmc10,
            self.eval_second.map,
            self.eval_second.cmc1,
            self.feature_std,
            self.collapsed
        )
    }
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from(HISTORY_CSV_HEADER);
    out.push('\n');
    for r in history {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

pub fn batch_log_csv(log: &[BatchRecord]) -> String {
    let mut out = String::from(
        "epoch,batch,loss_instance,loss_inter,loss_intra,loss_instance_sym,loss_inter_sym,loss_total,\
grad_norm_first,grad_norm_second\n",
    );
    for r in log {
        let l = &r.losses;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.epoch,
            r.batch,
            l.instance,
            l.inter,
            l.intra,
            l.instance_sym,
            l.inter_sym,
            l.total,
            l.grad_norm_first,
            l.grad_norm_second
        ));
    }
    out
}

/// Mean over dimensions of the per-dimension standard deviation of the
/// L2-normalized rows.
pub fn feature_spread(features: &Tensor) -> Result<f64> {
    let f = features.l2_normalized_rows()?;
    let (n, d) = (f.rows(), f.cols());
    if n == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for j in 0..d {
        let mean = (0..n).map(|i| f.row(i)[j]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (f.row(i)[j] - mean).powi(2)).sum::<f64>() / n as f64;
        total += var.sqrt();
    }
    Ok(total / d as f64)
}

/// Spread below which features count as collapsed: `0.1 / sqrt(D)`.
pub fn collapse_threshold(dim: usize) -> f64 {
    0.1 / (dim as f64).sqrt()
}

/// Per-epoch clustering output.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochClusters {
    pub coarse: ClusterAssignment,
    pub refined: ClusterAssignment,
    pub labels: PseudoLabels,
}

/// Clusters `features` at `dbscan_d`, over-segments at `dbscan_d_fine` and
/// refines unless the variant skips refinement.
pub fn cluster_features(features: &Tensor, cfg: &TrainConfig, epoch: usize) -> Result<EpochClusters> {
    let dist = pairwise_distance(features)?;
    let coarse = dbscan(&dist, cfg.dbscan_d, cfg.min_pts);
    let refined = if cfg.variant.refines() {
        let fine = dbscan(&dist, cfg.dbscan_d_fine, cfg.min_pts);
        refine(&coarse, &fine, &dist, cfg.min_cluster_size)
    } else {
        ClusterAssignment::from_groups(coarse.labels(), cfg.min_cluster_size)
    };
    let labels = assign_pseudo_labels(&refined, epoch);
    Ok(EpochClusters {
        coarse,
        refined,
        labels,
    })
}

pub struct TrainState {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: AdamState,
    /// Bank of `F` features, one row per training image.
    pub bank: MemoryBank,
    /// Bank of `F'` features.
    pub bank2: MemoryBank,
    pub best_map: f64,
    pub best_epoch: Option<usize>,
    pub best: Option<Checkpoint>,
    pub history: Vec<EpochRecord>,
    pub batch_log: Vec<BatchRecord>,
    /// Pseudo labels of the latest epoch, indexed by training position.
    pub labels: Option<PseudoLabels>,
    train: Vec<usize>,
}

fn normalized_rows(t: &Tensor) -> Result<Tensor> {
    t.l2_normalized_rows()
}

fn retrieval_set(ds: &Dataset, idx: &[usize], features: Tensor, role: Role) -> Result<RetrievalSet> {
    RetrievalSet::new(
        features,
        idx.iter().map(|&i| ds.samples[i].identity).collect(),
        idx.iter().map(|&i| ds.samples[i].camera).collect(),
        role,
    )
}

impl TrainState {
    /// Initializes parameters and fills both banks with the normalized
    /// features of the training images.
    pub fn new(cfg: &TrainConfig, ds: &Dataset) -> Result<Self> {
        cfg.validate()?;
        let train = ds.indices(SplitTag::Train);
        if train.is_empty() {
            return Err(Error::InvalidArgument("dataset has no training images".into()));
        }
        let first = &ds.samples[train[0]].image;
        let model = Model::init(cfg, first.height(), first.width())?;
        let images = ds.images(&train);
        let bank = MemoryBank::new(normalized_rows(&model.features(&images)?)?, cfg.alpha)?;
        let bank2 = MemoryBank::new(normalized_rows(&model.features_second(&images, cfg)?)?, cfg.alpha)?;
        let adam = AdamConfig {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        };
        let optimizer = AdamState::new(adam, model.tensors());
        Ok(TrainState {
            config: cfg.clone(),
            model,
            optimizer,
            bank,
            bank2,
            best_map: 0.0,
            best_epoch: None,
            best: None,
            history: Vec::new(),
            batch_log: Vec::new(),
            labels: None,
            train,
        })
    }

    /// Dataset indices of the training images, in bank-row order.
    pub fn train_indices(&self) -> &[usize] {
        &self.train
    }

    pub fn epochs_done(&self) -> usize {
        self.history.len()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            epoch: self.epochs_done(),
            model: self.model.clone(),
            bank: self.bank.clone(),
            bank2: self.bank2.clone(),
            best_map: self.best_map,
        }
    }

    /// Clustering of this epoch's first-branch features.
    pub fn cluster(&self, ds: &Dataset, epoch: usize) -> Result<EpochClusters> {
        let cfg = &self.config;
        let images = ds.images(&self.train);
        let features = match cfg.cluster_on {
            ClusterOn::Raw => self.model.features(&images)?,
            ClusterOn::ViewT => {
                let aug = cfg.augment();
                let views: Vec<Image> = self
                    .train
                    .iter()
                    .map(|&i| {
                        let mut rng = seeded(derive(derive(cfg.seed, 300 + epoch as u64), i as u64));
                        apply_basic(&ds.samples[i].image, &aug, &mut rng)
                    })
                    .collect();
                let refs: Vec<&Image> = views.iter().collect();
                self.model.features(&refs)?
            }
        };
        cluster_features(&features, cfg, epoch)
    }

    /// Retrieval metrics of both branches on the query/gallery split.
    pub fn evaluate(&self, ds: &Dataset) -> Result<(EvalResult, EvalResult)> {
        self.model.evaluate(ds, &self.config)
    }

    /// One optimization step on the training positions `batch`.
    fn step(
        &mut self,
        ds: &Dataset,
        batch: &[usize],
        labels: Option<&PseudoLabels>,
        centers: Option<&(crate::loss::ClusterCenters, crate::loss::ClusterCenters)>,
        epoch: usize,
    ) -> Result<LossBreakdown> {
        let cfg = &self.config;
        let aug = cfg.augment();
        let single = cfg.variant.single_branch();

        let mut first = Vec::with_capacity(batch.len());
        let mut second = Vec::with_capacity(batch.len());
        for &p in batch {
            let i = self.train[p];
            let mut rng = seeded(derive(derive(cfg.seed, 100 + epoch as u64), i as u64));
            if single {
                first.push(apply_basic(&ds.samples[i].image, &aug, &mut rng));
            } else {
                let (a, b) = make_views(&ds.samples[i].image, &aug, cfg.view_mode, &mut rng);
                first.push(a);
                second.push(b);
            }
        }

        let mut tape = Tape::new();
        let m = &self.model;
        let b_enc = m.encoder.bind(&mut tape, true);
        let b_pred = m.predictor.bind(&mut tape, true);
        let b_enc2 = m.encoder2.bind(&mut tape, true);
        let b_pred2 = m.predictor2.as_ref().map(|p| p.bind(&mut tape, true));

        let input = tape.constant(images_to_input(&first.iter().collect::<Vec<_>>())?);
        let x = m.encoder.encode(&mut tape, &b_enc, input)?;
        let (z, x2, z2) = if single {
            (None, None, None)
        } else {
            let z = m.predictor.predict(&mut tape, &b_pred, x)?;
            let input2 = tape.constant(images_to_input(&second.iter().collect::<Vec<_>>())?);
            let x2 = m.encoder2.encode(&mut tape, &b_enc2, input2)?;
            let z2 = match (&m.predictor2, &b_pred2) {
                (Some(p), Some(b)) => Some(p.predict(&mut tape, b, x2)?),
                _ => None,
            };
            (Some(z), Some(x2), z2)
        };

        let row_labels: Vec<Option<usize>> = batch.iter().map(|&p| labels.and_then(|l| l.get(p))).collect();
        let ctx = centers.map(|(c, c2)| ClusterContext {
            centers: c,
            centers2: c2,
            labels: &row_labels,
        });
        let out = BatchOutputs { x, z, x2, z2 };
        let mut br = total_loss(&mut tape, &out, ctx, &cfg.loss_config())?;
        let grads = tape.backward(br.total_var.expect("total is set"))?;

        let mut vars = b_enc.vars();
        let n_first = vars.len();
        vars.extend(b_pred.vars());
        let start_second = vars.len();
        vars.extend(b_enc2.vars());
        let end_second = vars.len();
        if let Some(b) = &b_pred2 {
            vars.extend(b.vars());
        }
        let reached: Vec<Option<&Tensor>> = vars.iter().map(|&v| grads.reached(v)).collect();
        let sq = |r: &[Option<&Tensor>]| r.iter().flatten().map(|g| g.norm().powi(2)).sum::<f64>().sqrt();
        br.grad_norm_first = sq(&reached[..n_first]);
        br.grad_norm_second = sq(&reached[start_second..end_second]);

        // Bank rows take the features computed before this step's update.
        let xv = normalized_rows(tape.value(x))?;
        let x2v = match x2 {
            Some(v) => Some(normalized_rows(tape.value(v))?),
            None => None,
        };

        self.optimizer.config.lr = lr_at(epoch, cfg);
        let mut params = self.model.tensors_mut();
        self.optimizer.step(&mut params, &reached)?;

        match x2v {
            Some(x2v) => update_banks(&mut self.bank, &mut self.bank2, batch, &xv, &x2v)?,
            None => self.bank.update(batch, &xv)?,
        }
        Ok(br)
    }

    /// Runs one epoch and appends its record to the history.
    pub fn epoch(&mut self, ds: &Dataset) -> Result<&EpochRecord> {
        let epoch = self.epochs_done();
        let cfg = self.config.clone();
        let lr = lr_at(epoch, &cfg);

        let clusters = if cfg.variant.clusters() {
            Some(self.cluster(ds, epoch)?)
        } else {
            None
        };
        let labels = clusters.as_ref().map(|c| c.labels.clone());
        let mut skipped = false;
        let centers = match &labels {
            Some(l) if !l.is_empty() => Some((compute_centers(&self.bank, l)?, compute_centers(&self.bank2, l)?)),
            Some(_) => {
                warn!("epoch {epoch}: no pseudo labels; training with the instance loss only");
                skipped = true;
                None
            }
            None => None,
        };

        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut seeded(derive(cfg.seed, 200 + epoch as u64)));
        let mut sums = LossBreakdown::default();
        let mut n_batches = 0usize;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let br = self.step(ds, batch, labels.as_ref(), centers.as_ref(), epoch)?;
            sums.instance += br.instance;
            sums.inter += br.inter;
            sums.intra += br.intra;
            sums.instance_sym += br.instance_sym;
            sums.inter_sym += br.inter_sym;
            sums.total += br.total;
            sums.grad_norm_first += br.grad_norm_first;
            sums.grad_norm_second += br.grad_norm_second;
            self.batch_log.push(BatchRecord {
                epoch,
                batch: b,
                losses: LossBreakdown { total_var: None, ..br },
            });
            n_batches += 1;
        }
        let nb = n_batches.max(1) as f64;

        let (eval, eval_second) = self.evaluate(ds)?;
        let train_images = ds.images(&self.train);
        let feature_std = feature_spread(&self.model.features(&train_images)?)?;
        let collapsed = feature_std < collapse_threshold(cfg.feature_dim);

        let (num_clusters, labeled_fraction) = match &clusters {
            Some(c) => (c.refined.num_clusters(), c.refined.labeled_fraction()),
            None => (0, 0.0),
        };
        info!(
            "epoch {epoch}: clusters {num_clusters}, labeled {labeled_fraction:.3}, loss {:.4}, mAP {:.4}, mAP' {:.4}, std {feature_std:.4}",
            sums.total / nb,
            eval.map,
            eval_second.map
        );
        let map = eval.map;
        self.labels = labels;
        self.history.push(EpochRecord {
            epoch,
            lr,
            num_clusters,
            labeled_fraction,
            cluster_terms_skipped: skipped,
            loss_instance: sums.instance / nb,
            loss_inter: sums.inter / nb,
            loss_intra: sums.intra / nb,
            loss_instance_sym: sums.instance_sym / nb,
            loss_inter_sym: sums.inter_sym / nb,
            loss_total: sums.total / nb,
            grad_norm_first: sums.grad_norm_first / nb,
            grad_norm_second: sums.grad_norm_second / nb,
            eval,
            eval_second,
            feature_std,
            collapsed,
        });
        if map > self.best_map {
            self.best_map = map;
            self.best_epoch = Some(epoch);
            self.best = Some(self.checkpoint());
        }
        Ok(self.history.last().expect("just pushed"))
    }

    /// Whether the collapse monitor fired at or after `collapse_after`.
    pub fn collapse_detected(&self) -> bool {
        self.history
            .iter()
            .any(|r| r.epoch >= self.config.collapse_after && r.collapsed)
    }
}

/// Runs `cfg.epochs` epochs from a fresh state.
pub fn train(cfg: &TrainConfig, ds: &Dataset) -> Result<TrainState> {
    let mut state = TrainState::new(cfg, ds)?;
    for _ in 0..cfg.epochs {
        state.epoch(ds)?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, split, SyntheticSpec};

    fn small_dataset(n_ids: usize, per_id: usize) -> Dataset {
        let ds = generate(&SyntheticSpec {
            n_identities: n_ids,
            images_per_identity: per_id,
            ..Default::default()
        })
        .unwrap();
        let tags = split(&ds, &mut seeded(1)).unwrap();
        ds.with_tags(tags).unwrap()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 16,
            hidden: vec![32],
            feature_dim: 16,
            ..Default::default()
        }
    }

    #[test]
    fn zero_epochs_leave_empty_history() {
        let ds = small_dataset(4, 6);
        let st = train(
            &TrainConfig {
                epochs: 0,
                ..small_config()
            },
            &ds,
        )
        .unwrap();
        assert!(st.history.is_empty());
        assert_eq!(st.best_map, 0.0);
    }

    #[test]
    fn one_epoch_smoke() {
        let ds = small_dataset(10, 5);
        let st = train(&small_config(), &ds).unwrap();
        assert_eq!(st.history.len(), 1);
        let e = &st.history[0].eval;
        assert!((0.0..=1.0).contains(&e.map));
        assert!(e.cmc1 <= e.cmc5 && e.cmc5 <= e.cmc10);
    }

    #[test]
    fn every_variant_runs() {
        let ds = small_dataset(6, 6);
        for v in Variant::ALL {
            let cfg = TrainConfig {
                variant: v,
                ..small_config()
            };
            let st = train(&cfg, &ds).unwrap();
            assert!(st.history[0].loss_total.is_finite(), "{v}");
        }
    }

    #[test]
    fn feature_spread_of_identical_rows_is_zero() {
        let f = Tensor::from_rows(&[[1.0, 2.0], [2.0, 4.0]]).unwrap();
        assert_eq!(feature_spread(&f).unwrap(), 0.0);
        let f = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert!((feature_spread(&f).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn best_map_tracks_history_max() {
        let ds = small_dataset(6, 6);
        let st = train(
            &TrainConfig {
                epochs: 3,
                ..small_config()
            },
            &ds,
        )
        .unwrap();
        let max = st.history.iter().map(|r| r.eval.map).fold(0.0, f64::max);
        assert_eq!(st.best_map, max);
    }

    #[test]
    fn history_csv_has_one_row_per_epoch() {
        let ds = small_dataset(6, 6);
        let st = train(
            &TrainConfig {
                epochs: 2,
                ..small_config()
            },
            &ds,
        )
        .unwrap();
        let csv = history_csv(&st.history);
        assert_eq!(csv.lines().count(), 3);
        let cols = HISTORY_CSV_HEADER.split(',').count();
        assert!(csv.lines().all(|l| l.split(',').count() == cols));
    }
}
