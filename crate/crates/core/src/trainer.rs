//! Tree pretraining, captioner fitting and the alternating co-training
//! loop: `critic_steps` critic updates, then one joint update of
//! generator, tree and captioner on the total loss.
//!
//! Every random draw (batch order, caption choice, penalty mixing weights,
//! dropout masks) is derived from `data_seed` and a step counter, so a
//! resumed run follows the same trajectory as an uninterrupted one.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s3e_autograd::{Adam, Graph, ParamId, Session, Tensor, Trainable, Var};
use serde::{Deserialize, Serialize};

use crate::capparse::{prune_to_tree, CaptionTreeLabels, LexiconTagger, Tagger, NUM_NODES};
use crate::captioner::{self, CaptionSample, Strategy};
use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::deblur;
use crate::error::{Error, Result};
use crate::image::{to_batch, ImageTensor};
use crate::manifest::{Manifest, Split};
use crate::metrics::Restorer;
use crate::model::{check_image_size, Model, BACKBONE, CAPTIONER, CRITIC, GENERATOR, S3TREE};
use crate::s3tree::{self, argmax, NodeBundle};

/// `L_ImD + λ_ImC · L_ImC + λ_T · L_T`.
pub fn total_loss(imd: f64, caption: f64, tree: f64, config: &TrainConfig) -> f64 {
    imd + config.lambda_caption * caption + config.lambda_tree * tree
}

fn total_loss_var<'g>(imd: Var<'g>, caption: Var<'g>, tree: Var<'g>, config: &TrainConfig) -> Var<'g> {
    imd.add(caption.scale(config.lambda_caption))
        .add(tree.scale(config.lambda_tree))
}

/// Constant `lr` for `epochs_flat` epochs, then linear to zero over
/// `epochs_decay` epochs; zero afterwards.
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> f64 {
    if epoch < config.epochs_flat {
        return config.lr;
    }
    if config.epochs_decay == 0 {
        return 0.0;
    }
    let into = (epoch - config.epochs_flat) as f64 / config.epochs_decay as f64;
    config.lr * (1.0 - into).max(0.0)
}

/// One image with its captions, encoded for training.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    pub blurry: ImageTensor,
    pub sharp: ImageTensor,
    pub captions: Vec<String>,
    pub tokens: Vec<CaptionSample>,
    pub labels: Vec<CaptionTreeLabels>,
}

/// Training examples with cached backbone features.
pub struct TrainSet {
    pub examples: Vec<Example>,
    /// `V` per example, `[c, h', w']`; present when the backbone is frozen.
    features: Option<Vec<Tensor>>,
}

impl TrainSet {
    /// Encodes captions and, for frozen backbones, caches features.
    /// Examples without tree labels are labeled with the bundled tagger.
    pub fn new(model: &Model, raw: Vec<(String, ImageTensor, ImageTensor, Vec<String>)>) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        let tagger = LexiconTagger::default();
        let cfg = &model.config;
        let mut examples = Vec::with_capacity(raw.len());
        for (id, blurry, sharp, captions) in raw {
            check_image_size(&blurry, cfg.image_size, &id)?;
            check_image_size(&sharp, cfg.image_size, &id)?;
            if captions.is_empty() {
                return Err(Error::Data(format!("example {id} has no caption")));
            }
            let labels = captions
                .iter()
                .map(|c| {
                    Ok(prune_to_tree(
                        &tagger.tag(c)?,
                        &model.vocabs.entities,
                        &model.vocabs.relations,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            let tokens = captions
                .iter()
                .map(|c| model.vocabs.captions.encode(c, cfg.caption_len))
                .collect();
            examples.push(Example {
                id,
                blurry,
                sharp,
                captions,
                tokens,
                labels,
            });
        }
        let mut set = Self {
            examples,
            features: None,
        };
        set.refresh_features(model)?;
        Ok(set)
    }

    /// Loads one split of a manifest. Stored tree labels take precedence
    /// over tagging.
    pub fn from_manifest(model: &Model, manifest: &Manifest, split: Split) -> Result<Self> {
        let records = manifest.split(split);
        let mut raw = Vec::with_capacity(records.len());
        for r in &records {
            raw.push((
                r.id.clone(),
                ImageTensor::load_png(&manifest.resolve(&r.blurry_path))?,
                ImageTensor::load_png(&manifest.resolve(&r.sharp_path))?,
                r.captions.clone(),
            ));
        }
        let mut set = Self::new(model, raw)?;
        for (ex, r) in set.examples.iter_mut().zip(&records) {
            if !r.tree_labels.is_empty() {
                for l in &r.tree_labels {
                    l.validate(model.vocabs.entities.len(), model.vocabs.relations.len())
                        .map_err(|e| Error::Manifest(format!("record {}: {e}", r.id)))?;
                }
                ex.labels = r.tree_labels.clone();
            }
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Every (example, caption) pair.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.examples
            .iter()
            .enumerate()
            .flat_map(|(i, e)| (0..e.captions.len()).map(move |k| (i, k)))
            .collect()
    }

    fn refresh_features(&mut self, model: &Model) -> Result<()> {
        if !model.config.freeze_backbone {
            self.features = None;
            return Ok(());
        }
        let mut feats = Vec::with_capacity(self.examples.len());
        for chunk in self.examples.chunks(16) {
            let batch = to_batch(&chunk.iter().map(|e| &e.blurry).collect::<Vec<_>>())?;
            let v = model.features(&batch);
            feats.extend(v.outer_iter().map(|t| t.to_owned()));
        }
        self.features = Some(feats);
        Ok(())
    }

    fn batch(&self, pairs: &[(usize, usize)]) -> Result<Batch> {
        let blurry: Vec<&ImageTensor> = pairs.iter().map(|&(i, _)| &self.examples[i].blurry).collect();
        let sharp: Vec<&ImageTensor> = pairs.iter().map(|&(i, _)| &self.examples[i].sharp).collect();
        let features = self.features.as_ref().map(|f| {
            let views: Vec<_> = pairs.iter().map(|&(i, _)| f[i].view()).collect();
            ndarray::stack(ndarray::Axis(0), &views).expect("cached features share a shape")
        });
        Ok(Batch {
            blurry: to_batch(&blurry)?,
            sharp: to_batch(&sharp)?,
            features,
            labels: pairs.iter().map(|&(i, k)| self.examples[i].labels[k]).collect(),
            tokens: pairs.iter().map(|&(i, k)| self.examples[i].tokens[k].clone()).collect(),
        })
    }
}

struct Batch {
    blurry: Tensor,
    sharp: Tensor,
    features: Option<Tensor>,
    labels: Vec<CaptionTreeLabels>,
    tokens: Vec<CaptionSample>,
}

impl Batch {
    fn len(&self) -> usize {
        self.labels.len()
    }

    /// `V` as a constant, or through the (trainable) backbone.
    fn features<'g>(&self, s: &Session<'g, '_>, model: &Model) -> Var<'g> {
        match &self.features {
            Some(v) => s.constant(v.clone()),
            None => model.backbone.forward(s, s.constant(self.blurry.clone())),
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogEntry {
    Tree {
        step: u64,
        loss: f64,
        accuracy: f64,
        node_accuracy: [f64; NUM_NODES],
    },
    Caption {
        step: u64,
        loss: f64,
        per_token: f64,
    },
    Critic {
        step: u64,
        joint_step: u64,
        loss: f64,
        wasserstein: f64,
        penalty: f64,
    },
    Joint {
        step: u64,
        epoch: usize,
        lr: f64,
        total: f64,
        imd: f64,
        gan: f64,
        content: f64,
        caption: f64,
        tree: f64,
    },
}

/// Step counters and optimizer states.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub joint_steps: u64,
    pub critic_steps: u64,
    pub tree_steps: u64,
    pub caption_steps: u64,
    pub epoch: usize,
    pub batch_in_epoch: usize,
    pub critic_opt: Adam,
    pub joint_opt: Adam,
    pub tree_opt: Adam,
    pub caption_opt: Adam,
}

#[derive(Serialize, Deserialize)]
struct Counters {
    joint_steps: u64,
    critic_steps: u64,
    tree_steps: u64,
    caption_steps: u64,
    epoch: usize,
    batch_in_epoch: usize,
    seed: u64,
    data_seed: u64,
}

/// Adam betas for the single-objective phases.
const PLAIN_BETAS: (f64, f64) = (0.9, 0.999);

impl TrainState {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            joint_steps: 0,
            critic_steps: 0,
            tree_steps: 0,
            caption_steps: 0,
            epoch: 0,
            batch_in_epoch: 0,
            critic_opt: Adam::new(config.lr, config.beta1, config.beta2),
            joint_opt: Adam::new(config.lr, config.beta1, config.beta2),
            tree_opt: Adam::new(config.pretrain_lr, PLAIN_BETAS.0, PLAIN_BETAS.1),
            caption_opt: Adam::new(config.caption_lr, PLAIN_BETAS.0, PLAIN_BETAS.1),
        }
    }
}

const TAG_ORDER: u64 = 1;
const TAG_CAPTION: u64 = 2;
const TAG_MIX: u64 = 3;
const TAG_DROPOUT: u64 = 4;
const TAG_TREE: u64 = 5;
const TAG_CAPTIONER: u64 = 6;

/// Independent stream seed for `(tag, index)`.
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    for _ in 0..2 {
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Batches of a pass that walks a seeded permutation of `items`.
fn pass_batches<T: Copy>(items: &[T], batch: usize, seed: u64) -> Vec<Vec<T>> {
    shuffled(items.len(), seed)
        .chunks(batch.max(1))
        .map(|c| c.iter().map(|&i| items[i]).collect())
        .collect()
}

fn ensure_finite(value: f64, component: &str, step: u64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            component: component.into(),
            step,
        })
    }
}

fn ensure_finite_grads(grads: &[(ParamId, Tensor)], component: &str, step: u64) -> Result<()> {
    if grads.iter().all(|(_, g)| g.iter().all(|v| v.is_finite())) {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            component: format!("{component} gradient"),
            step,
        })
    }
}

/// Per-node and overall top-1 accuracy of a tree pass.
pub fn node_accuracies(bundle: &NodeBundle<'_>, labels: &[CaptionTreeLabels]) -> ([f64; NUM_NODES], f64) {
    let mut per = [0.0; NUM_NODES];
    for (j, slot) in per.iter_mut().enumerate() {
        let p = bundle.probs(j + 1).value();
        let hits = labels
            .iter()
            .enumerate()
            .filter(|(i, l)| argmax(p.index_axis(ndarray::Axis(0), *i).iter().copied()) == l.node(j + 1))
            .count();
        *slot = hits as f64 / labels.len().max(1) as f64;
    }
    (per, s3tree::node_accuracy(bundle, labels))
}

/// Model, optimizer state and the log of everything run so far.
pub struct Trainer {
    pub model: Model,
    pub state: TrainState,
    pub log: Vec<LogEntry>,
}

impl Trainer {
    pub fn new(model: Model) -> Self {
        let state = TrainState::new(&model.config);
        Self {
            model,
            state,
            log: Vec::new(),
        }
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new();
        self.model.write_checkpoint(&mut c)?;
        let s = &self.state;
        c.put_json(
            "state",
            &Counters {
                joint_steps: s.joint_steps,
                critic_steps: s.critic_steps,
                tree_steps: s.tree_steps,
                caption_steps: s.caption_steps,
                epoch: s.epoch,
                batch_in_epoch: s.batch_in_epoch,
                seed: self.model.config.seed,
                data_seed: self.model.config.data_seed,
            },
        )?;
        c.put_adam("optim.critic", &s.critic_opt);
        c.put_adam("optim.joint", &s.joint_opt);
        c.put_adam("optim.tree", &s.tree_opt);
        c.put_adam("optim.captioner", &s.caption_opt);
        Ok(c)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let model = Model::from_checkpoint(ckpt)?;
        let mut state = TrainState::new(&model.config);
        let k: Counters = ckpt.get_json("state")?;
        state.joint_steps = k.joint_steps;
        state.critic_steps = k.critic_steps;
        state.tree_steps = k.tree_steps;
        state.caption_steps = k.caption_steps;
        state.epoch = k.epoch;
        state.batch_in_epoch = k.batch_in_epoch;
        ckpt.get_adam("optim.critic", &mut state.critic_opt)?;
        ckpt.get_adam("optim.joint", &mut state.joint_opt)?;
        ckpt.get_adam("optim.tree", &mut state.tree_opt)?;
        ckpt.get_adam("optim.captioner", &mut state.caption_opt)?;
        Ok(Self {
            model,
            state,
            log: Vec::new(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Appends the log as JSON Lines.
    pub fn write_log(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for e in &self.log {
            serde_json::to_writer(&mut out, e)?;
            out.push(b'\n');
        }
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    fn config(&self) -> &TrainConfig {
        &self.model.config
    }

    /// Minimizes the tree loss alone for `steps` updates.
    pub fn pretrain_tree(&mut self, data: &TrainSet, steps: u64) -> Result<()> {
        let pairs = data.pairs();
        let per_pass = pairs.len().div_ceil(self.config().batch_size) as u64;
        let mut trainable = vec![S3TREE];
        if !self.config().freeze_backbone {
            trainable.push(BACKBONE);
        }
        for _ in 0..steps {
            let step = self.state.tree_steps;
            let (pass, slot) = (step / per_pass, (step % per_pass) as usize);
            let order = pass_batches(
                &pairs,
                self.config().batch_size,
                derive_seed(self.config().data_seed, TAG_TREE, pass),
            );
            let batch = data.batch(&order[slot])?;
            let g = Graph::new();
            let s = Session::new(&g, &self.model.store).with_trainable(Trainable::prefixes(&trainable));
            let v = batch.features(&s, &self.model);
            let bundle = s3tree::tree_forward(&s, v, &self.model.tree)?;
            let loss = s3tree::tree_loss(&bundle, &batch.labels)?;
            ensure_finite(loss.item(), "tree", step)?;
            let (per, acc) = node_accuracies(&bundle, &batch.labels);
            let grads = s.param_grads(&g.backward(loss));
            ensure_finite_grads(&grads, "tree", step)?;
            drop(s);
            self.state.tree_opt.step(&mut self.model.store, &grads);
            self.state.tree_steps += 1;
            self.log.push(LogEntry::Tree {
                step,
                loss: loss.item(),
                accuracy: acc,
                node_accuracy: per,
            });
            if step.is_multiple_of(50) {
                log::info!("tree step {step}: loss {:.4}, accuracy {acc:.3}", loss.item());
            }
        }
        Ok(())
    }

    /// Node accuracy over every (example, caption) pair.
    pub fn tree_accuracy(&self, data: &TrainSet) -> Result<([f64; NUM_NODES], f64)> {
        let pairs = data.pairs();
        let batch = data.batch(&pairs)?;
        let g = Graph::new();
        let s = Session::new(&g, &self.model.store).with_trainable(Trainable::Nothing);
        let bundle = s3tree::tree_forward(&s, batch.features(&s, &self.model), &self.model.tree)?;
        Ok(node_accuracies(&bundle, &batch.labels))
    }

    /// Fits the caption decoder alone on the teacher-forced likelihood.
    pub fn fit_captioner(&mut self, data: &TrainSet, steps: u64) -> Result<()> {
        let pairs = data.pairs();
        let per_pass = pairs.len().div_ceil(self.config().batch_size) as u64;
        for _ in 0..steps {
            let step = self.state.caption_steps;
            let (pass, slot) = (step / per_pass, (step % per_pass) as usize);
            let order = pass_batches(
                &pairs,
                self.config().batch_size,
                derive_seed(self.config().data_seed, TAG_CAPTIONER, pass),
            );
            let batch = data.batch(&order[slot])?;
            let g = Graph::new();
            let s = Session::new(&g, &self.model.store).with_trainable(Trainable::prefixes(&[CAPTIONER]));
            let (loss, count) = self.caption_objective(&s, &batch)?;
            ensure_finite(loss.item(), "caption", step)?;
            let grads = s.param_grads(&g.backward(loss));
            ensure_finite_grads(&grads, "caption", step)?;
            drop(s);
            self.state.caption_opt.step(&mut self.model.store, &grads);
            self.state.caption_steps += 1;
            let per_token = loss.item() * batch.len() as f64 / count.max(1) as f64;
            self.log.push(LogEntry::Caption {
                step,
                loss: loss.item(),
                per_token,
            });
            if step.is_multiple_of(50) {
                log::info!("caption step {step}: per-token NLL {per_token:.4}");
            }
        }
        Ok(())
    }

    fn caption_objective<'g>(&self, s: &Session<'g, '_>, batch: &Batch) -> Result<(Var<'g>, usize)> {
        let v = batch.features(s, &self.model);
        let bundle = s3tree::tree_forward(s, v, &self.model.tree)?;
        let p = &self.model.captioner;
        let h_v = captioner::pool_image_vector(s, v, p);
        let memory = captioner::node_memory(s, &captioner::attention_inputs(&bundle, p), p)?;
        captioner::caption_loss(s, &batch.tokens, h_v, &memory, p)
    }

    /// Per-token likelihood over every caption, and greedy decodes.
    pub fn caption_report(&self, data: &TrainSet) -> Result<(f64, Vec<String>)> {
        let pairs = data.pairs();
        let batch = data.batch(&pairs)?;
        let g = Graph::new();
        let s = Session::new(&g, &self.model.store).with_trainable(Trainable::Nothing);
        let (loss, count) = self.caption_objective(&s, &batch)?;
        let per_token = loss.item() * batch.len() as f64 / count.max(1) as f64;
        let v = batch.features(&s, &self.model);
        let bundle = s3tree::tree_forward(&s, v, &self.model.tree)?;
        let p = &self.model.captioner;
        let h_v = captioner::pool_image_vector(&s, v, p);
        let memory = captioner::node_memory(&s, &captioner::attention_inputs(&bundle, p), p)?;
        let decoded = captioner::generate(&s, h_v, &memory, p, Strategy::Greedy, self.config().caption_len)?
            .iter()
            .map(|c| self.model.vocabs.captions.decode(c))
            .collect();
        Ok((per_token, decoded))
    }

    /// Runs the alternating schedule for `steps` joint updates (default:
    /// `max_steps`, else to the end of the schedule). Periodic and
    /// abort checkpoints go to `out_dir` when it is set.
    pub fn cotrain(&mut self, data: &TrainSet, steps: Option<u64>) -> Result<()> {
        let budget = steps.or(self.config().max_steps);
        let out_dir = self.config().out_dir.clone();
        let mut done = 0u64;
        while self.state.epoch < self.config().total_epochs() {
            let epoch = self.state.epoch;
            let lr = lr_schedule(epoch, self.config());
            self.state.critic_opt.lr = lr;
            self.state.joint_opt.lr = lr;
            let indices: Vec<usize> = (0..data.len()).collect();
            let order = pass_batches(
                &indices,
                self.config().batch_size,
                derive_seed(self.config().data_seed, TAG_ORDER, epoch as u64),
            );
            while self.state.batch_in_epoch < order.len() {
                if budget.is_some_and(|b| done >= b) {
                    return Ok(());
                }
                let members = &order[self.state.batch_in_epoch];
                if let Err(e) = self.iteration(data, members, epoch, lr) {
                    if let (Error::NonFiniteLoss { .. }, Some(dir)) = (&e, &out_dir) {
                        self.save(&dir.join("last_good.s3ed"))?;
                    }
                    return Err(e);
                }
                self.state.batch_in_epoch += 1;
                done += 1;
            }
            self.state.batch_in_epoch = 0;
            self.state.epoch += 1;
            let every = self.config().checkpoint_every;
            if let Some(dir) = &out_dir {
                if every > 0 && self.state.epoch.is_multiple_of(every) {
                    self.save(&checkpoint_path(dir, self.state.epoch))?;
                }
            }
        }
        Ok(())
    }

    fn iteration(&mut self, data: &TrainSet, members: &[usize], epoch: usize, lr: f64) -> Result<()> {
        let cfg = self.model.config.clone();
        let step = self.state.joint_steps;
        let mut pick = ChaCha8Rng::seed_from_u64(derive_seed(cfg.data_seed, TAG_CAPTION, step));
        let pairs: Vec<(usize, usize)> = members
            .iter()
            .map(|&i| (i, pick.random_range(0..data.examples[i].captions.len())))
            .collect();
        let batch = data.batch(&pairs)?;
        let n = batch.len();
        let dropout_seed = derive_seed(cfg.data_seed, TAG_DROPOUT, step);

        // the generator is fixed while the critic trains, so one fake batch serves all critic steps
        let fake = {
            let g = Graph::new();
            let s = Session::new(&g, &self.model.store)
                .with_trainable(Trainable::Nothing)
                .with_seed(dropout_seed);
            let v = batch.features(&s, &self.model);
            let bundle = s3tree::tree_forward(&s, v, &self.model.tree)?;
            let coupled = s3tree::couple_tree_maps(&bundle);
            let fake = deblur::generator_forward(&s, &self.model.generator, s.constant(batch.blurry.clone()), coupled)?;
            fake.value().as_ref().clone()
        };

        for _ in 0..cfg.critic_steps {
            let cstep = self.state.critic_steps;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.data_seed, TAG_MIX, cstep));
            let mix: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let g = Graph::new();
            let s = Session::new(&g, &self.model.store).with_trainable(Trainable::prefixes(&[CRITIC]));
            let loss = deblur::critic_wgan_gp_loss(
                &s,
                &self.model.critic,
                s.constant(batch.sharp.clone()),
                s.constant(fake.clone()),
                cfg.gp_weight,
                &mix,
            )?;
            ensure_finite(loss.total.item(), "critic", cstep)?;
            let grads = s.param_grads(&g.backward(loss.total));
            ensure_finite_grads(&grads, "critic", cstep)?;
            drop(s);
            self.state.critic_opt.step(&mut self.model.store, &grads);
            self.state.critic_steps += 1;
            self.log.push(LogEntry::Critic {
                step: cstep,
                joint_step: step,
                loss: loss.total.item(),
                wasserstein: loss.wasserstein.item(),
                penalty: loss.penalty.item(),
            });
        }

        let mut trainable = vec![GENERATOR, S3TREE];
        if cfg.lambda_caption > 0.0 {
            trainable.push(CAPTIONER);
        }
        if !cfg.freeze_backbone {
            trainable.push(BACKBONE);
        }
        let g = Graph::new();
        let s = Session::new(&g, &self.model.store)
            .with_trainable(Trainable::prefixes(&trainable))
            .with_seed(dropout_seed);
        let v = batch.features(&s, &self.model);
        let bundle = s3tree::tree_forward(&s, v, &self.model.tree)?;
        let coupled = s3tree::couple_tree_maps(&bundle);
        let sharp = s.constant(batch.sharp.clone());
        let restored = deblur::generator_forward(&s, &self.model.generator, s.constant(batch.blurry.clone()), coupled)?;
        let gan = deblur::generator_gan_loss(&s, &self.model.critic, restored);
        let content = deblur::perceptual_loss(&s, sharp, restored, &self.model.perceptual)?;
        let imd = deblur::imd_loss(gan, content, cfg.lambda_content);
        let p = &self.model.captioner;
        let h_v = captioner::pool_image_vector(&s, v, p);
        let memory = captioner::node_memory(&s, &captioner::attention_inputs(&bundle, p), p)?;
        let (caption, _) = captioner::caption_loss(&s, &batch.tokens, h_v, &memory, p)?;
        let tree = s3tree::tree_loss(&bundle, &batch.labels)?;
        let total = total_loss_var(imd, caption, tree, &cfg);
        for (name, value) in [
            ("deblurring", imd.item()),
            ("caption", caption.item()),
            ("tree", tree.item()),
            ("total", total.item()),
        ] {
            ensure_finite(value, name, step)?;
        }
        let grads = s.param_grads(&g.backward(total));
        ensure_finite_grads(&grads, "joint", step)?;
        drop(s);
        self.state.joint_opt.step(&mut self.model.store, &grads);
        self.state.joint_steps += 1;
        self.log.push(LogEntry::Joint {
            step,
            epoch,
            lr,
            total: total.item(),
            imd: imd.item(),
            gan: gan.item(),
            content: content.item(),
            caption: caption.item(),
            tree: tree.item(),
        });
        if step.is_multiple_of(25) {
            log::info!(
                "joint step {step} (epoch {epoch}): total {:.4}, content {:.5}, tree {:.4}, caption {:.4}",
                total.item(),
                content.item(),
                tree.item(),
                caption.item()
            );
        }
        Ok(())
    }

    /// Mean PSNR of restored and of blurry images against the sharp ones.
    pub fn training_psnr(&self, data: &TrainSet) -> Result<(f64, f64)> {
        let mut restored_sum = 0.0;
        let mut input_sum = 0.0;
        for ex in &data.examples {
            let (restored, _) = self.model.restore(&ex.blurry)?;
            restored_sum += crate::metrics::psnr(&restored, &ex.sharp, 1.0)?;
            input_sum += crate::metrics::psnr(&ex.blurry, &ex.sharp, 1.0)?;
        }
        let n = data.len() as f64;
        Ok((restored_sum / n, input_sum / n))
    }
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:04}.s3ed"))
}

/// Critic and joint step counts in a log.
pub fn step_counts(log: &[LogEntry]) -> (usize, usize) {
    let critic = log.iter().filter(|e| matches!(e, LogEntry::Critic { .. })).count();
    let joint = log.iter().filter(|e| matches!(e, LogEntry::Joint { .. })).count();
    (critic, joint)
}

impl Restorer for Model {
    /// Greedy caption, dropout masks seeded by `data_seed`.
    fn restore(&self, blurry: &ImageTensor) -> Result<(ImageTensor, Option<String>)> {
        let out = self.infer(&[blurry], Strategy::Greedy, self.config.data_seed)?;
        let first = out.into_iter().next().expect("one output per input");
        Ok((first.restored, Some(first.caption)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Vocabularies;
    use crate::toyset;

    #[test]
    fn total_loss_is_the_weighted_sum() {
        let c = TrainConfig::default();
        assert_eq!(total_loss(1.0, 2.0, 3.0, &c), 31.01);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &c), 0.0);
        let pure = TrainConfig {
            lambda_caption: 0.0,
            lambda_tree: 0.0,
            ..c
        };
        assert_eq!(total_loss(1.5, 2.0, 3.0, &pure), 1.5);
    }

    #[test]
    fn schedule_endpoints() {
        let c = TrainConfig::default();
        assert_eq!(lr_schedule(0, &c), 1e-4);
        assert_eq!(lr_schedule(149, &c), 1e-4);
        assert_eq!(lr_schedule(150, &c), 1e-4);
        assert!((lr_schedule(225, &c) - 5e-5).abs() < 1e-18);
        assert_eq!(lr_schedule(300, &c), 0.0);
        assert_eq!(lr_schedule(10_000, &c), 0.0);
    }

    fn tiny() -> (Trainer, TrainSet) {
        let cfg = TrainConfig {
            batch_size: 2,
            critic_steps: 2,
            ..TrainConfig::desk()
        };
        let scenes = toyset::scenes(4, 32, 9);
        let vocabs = Vocabularies::build(&toyset::captions(&scenes), &cfg).unwrap();
        let model = Model::new(cfg, vocabs).unwrap();
        let data = TrainSet::new(&model, toyset::blurred_examples(&scenes, 3)).unwrap();
        (Trainer::new(model), data)
    }

    #[test]
    fn frozen_backbone_and_isolated_captioner_stay_bitwise_fixed() {
        let (mut t, data) = tiny();
        t.model.config.lambda_caption = 0.0;
        t.model.config.lambda_tree = 0.0;
        let before = t.model.store.clone();
        t.cotrain(&data, Some(1)).unwrap();
        for (id, p) in t.model.store.iter() {
            let fixed =
                p.name.starts_with(BACKBONE) || p.name.starts_with(CAPTIONER) || p.name.starts_with("perceptual.");
            if fixed {
                assert_eq!(p.value, *before.get(id), "{} moved", p.name);
            }
        }
        assert_ne!(t.model.store, before);
    }

    #[test]
    fn log_ratio_matches_critic_steps() {
        let (mut t, data) = tiny();
        t.cotrain(&data, Some(3)).unwrap();
        assert_eq!(step_counts(&t.log), (6, 3));
        assert_eq!(t.state.joint_steps, 3);
        assert_eq!(t.state.epoch, 1);
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        let (mut a, data) = tiny();
        a.cotrain(&data, Some(3)).unwrap();
        let (mut b, _) = tiny();
        b.cotrain(&data, Some(1)).unwrap();
        let mut b = Trainer::from_checkpoint(&b.checkpoint().unwrap()).unwrap();
        b.cotrain(&data, Some(2)).unwrap();
        assert_eq!(a.model.store, b.model.store);
        assert_eq!(a.checkpoint().unwrap().to_bytes(), b.checkpoint().unwrap().to_bytes());
    }

    #[test]
    fn pretraining_lowers_tree_loss() {
        let (mut t, data) = tiny();
        t.pretrain_tree(&data, 20).unwrap();
        let losses: Vec<f64> = t
            .log
            .iter()
            .filter_map(|e| match e {
                LogEntry::Tree { loss, .. } => Some(*loss),
                _ => None,
            })
            .collect();
        assert_eq!(losses.len(), 20);
        assert!(losses[19] < losses[0]);
    }

    #[test]
    fn non_finite_loss_aborts_and_keeps_last_good_checkpoint() {
        let (mut t, data) = tiny();
        let dir = tempfile::tempdir().unwrap();
        t.model.config.out_dir = Some(dir.path().to_path_buf());
        let id = t.model.store.id("generator.output.bias").unwrap();
        t.model.store.get_mut(id).fill(f64::NAN);
        let err = t.cotrain(&data, Some(1)).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { .. }), "{err}");
        let saved = Trainer::load(&dir.path().join("last_good.s3ed")).unwrap();
        assert_eq!(saved.state.joint_steps, 0);
    }

    #[test]
    fn empty_training_split_is_a_data_error() {
        let (t, _) = tiny();
        assert!(matches!(TrainSet::new(&t.model, vec![]), Err(Error::Data(_))));
    }
}
