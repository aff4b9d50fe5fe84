//! The full network: frozen backbone, tree, generator, critic, captioner
//! and content-loss features, all in one [`ParamStore`].

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use s3e_autograd::{ConvGeometry, Graph, ParamStore, Session, Tensor, Trainable, Var};
use serde::{Deserialize, Serialize};

use crate::capparse::{build_vocabs_with, LexiconTagger, Tagger, Vocab, VocabKind};
use crate::captioner::{self, CaptionVocab, CaptionerConfig, DecoderParams, Strategy};
use crate::checkpoint::{Checkpoint, NamedTensor};
use crate::config::TrainConfig;
use crate::deblur::{self, CriticConfig, Generator, GeneratorConfig, PatchCritic, PerceptualExtractor};
use crate::error::{shape_err, Error, Result};
use crate::image::{from_batch, to_batch, ImageTensor};
use crate::nn::Conv;
use crate::s3tree::{self, TreeConfig, TreeParams};

pub const BACKBONE: &str = "backbone.";
pub const S3TREE: &str = "s3tree.";
pub const GENERATOR: &str = "generator.";
pub const CRITIC: &str = "critic.";
pub const CAPTIONER: &str = "captioner.";
pub const PERCEPTUAL: &str = "perceptual.";

/// Parameter groups in store order; each is one checkpoint section.
pub const GROUPS: [&str; 6] = [BACKBONE, S3TREE, GENERATOR, CRITIC, CAPTIONER, PERCEPTUAL];

/// Stride-2 3×3 convolutions with rectifiers, `3 → c → … → c`.
pub struct Backbone {
    pub convs: Vec<Conv>,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, layers: usize, rng: &mut ChaCha8Rng) -> Self {
        let geo = ConvGeometry::new(3, 2, 1);
        let convs = (0..layers)
            .map(|l| {
                let cin = if l == 0 { 3 } else { channels };
                Conv::new(store, &format!("{prefix}conv{l}"), cin, channels, geo, true, rng)
            })
            .collect();
        Self { convs }
    }

    pub fn forward<'g>(&self, s: &Session<'g, '_>, x: Var<'g>) -> Var<'g> {
        self.convs.iter().fold(x, |a, c| c.forward(s, a).relu())
    }
}

/// Entity, relation and caption word lists.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabularies {
    pub entities: Vocab,
    pub relations: Vocab,
    pub captions: CaptionVocab,
}

#[derive(Serialize, Deserialize)]
struct VocabLists {
    entities: Vec<String>,
    relations: Vec<String>,
    captions: Vec<String>,
}

pub const ENTITY_FILE: &str = "entities.txt";
pub const RELATION_FILE: &str = "relations.txt";
pub const CAPTION_FILE: &str = "captions.txt";

impl Vocabularies {
    /// Tree vocabularies from the bundled tagger and the caption
    /// vocabulary, with the configured minimum frequencies.
    pub fn build<S: AsRef<str>>(captions: &[S], config: &TrainConfig) -> Result<Self> {
        Self::build_with(captions, config, &LexiconTagger::default(), None)
    }

    /// As [`Vocabularies::build`], with a custom tagger and an optional
    /// synonym map for the tree vocabularies.
    pub fn build_with<S: AsRef<str>>(
        captions: &[S],
        config: &TrainConfig,
        tagger: &dyn Tagger,
        synonyms: Option<&HashMap<String, String>>,
    ) -> Result<Self> {
        let (entities, relations) = build_vocabs_with(captions, config.vocab_min_freq, tagger, synonyms)?;
        Ok(Self {
            entities,
            relations,
            captions: CaptionVocab::build(captions, config.caption_min_freq),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.entities.save(&dir.join(ENTITY_FILE))?;
        self.relations.save(&dir.join(RELATION_FILE))?;
        self.captions.save(&dir.join(CAPTION_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            entities: Vocab::load(VocabKind::Entity, &dir.join(ENTITY_FILE))?,
            relations: Vocab::load(VocabKind::Relation, &dir.join(RELATION_FILE))?,
            captions: CaptionVocab::load(&dir.join(CAPTION_FILE))?,
        })
    }

    fn to_lists(&self) -> VocabLists {
        VocabLists {
            entities: self.entities.words()[1..].to_vec(),
            relations: self.relations.words()[1..].to_vec(),
            captions: self.captions.words().to_vec(),
        }
    }

    fn from_lists(l: VocabLists) -> Result<Self> {
        Ok(Self {
            entities: Vocab::new(VocabKind::Entity, l.entities),
            relations: Vocab::new(VocabKind::Relation, l.relations),
            captions: CaptionVocab::from_list(l.captions)?,
        })
    }
}

/// Where the content-loss features come from.
pub enum PerceptualSource<'a> {
    Random,
    File(&'a Path),
    /// Placeholders of the given `[o, i, 3, 3]` shapes, filled later.
    Shapes(Vec<Vec<usize>>),
}

pub struct Model {
    pub config: TrainConfig,
    pub vocabs: Vocabularies,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub tree: TreeParams,
    pub generator: Generator,
    pub critic: PatchCritic,
    pub captioner: DecoderParams,
    pub perceptual: PerceptualExtractor,
}

impl Model {
    /// Seeded construction from `config.seed`. Content-loss features are
    /// read from `config.perceptual_weights` when set.
    pub fn new(config: TrainConfig, vocabs: Vocabularies) -> Result<Self> {
        let weights = config.perceptual_weights.clone();
        let source = match &weights {
            Some(p) => PerceptualSource::File(p),
            None => PerceptualSource::Random,
        };
        Self::assemble(config, vocabs, source)
    }

    fn assemble(config: TrainConfig, vocabs: Vocabularies, perceptual: PerceptualSource<'_>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let c = config.backbone_channels;
        let cn = config.node_channels;
        let backbone = Backbone::new(&mut store, BACKBONE, c, config.backbone_layers, &mut rng);
        store.freeze_prefix(BACKBONE, config.freeze_backbone);
        let tree = TreeParams::new(
            &mut store,
            S3TREE,
            TreeConfig {
                in_channels: c,
                node_channels: cn,
                entity_vocab: vocabs.entities.len(),
                relation_vocab: vocabs.relations.len(),
                form: config.fusion,
            },
            &mut rng,
        );
        let generator = Generator::new(
            &mut store,
            GENERATOR,
            GeneratorConfig {
                base_channels: config.generator_channels,
                residual_blocks: config.residual_blocks,
                coupling_channels: config.coupling_channels,
                tree_channels: 7 * cn,
                dropout: config.dropout,
                form: config.fusion,
            },
            &mut rng,
        );
        let critic = PatchCritic::new(
            &mut store,
            CRITIC,
            CriticConfig {
                base_channels: config.critic_channels,
                layers: config.critic_layers,
                slope: config.critic_slope,
            },
            &mut rng,
        );
        let captioner = DecoderParams::new(
            &mut store,
            CAPTIONER,
            CaptionerConfig {
                vocab: vocabs.captions.len(),
                entity_vocab: vocabs.entities.len(),
                relation_vocab: vocabs.relations.len(),
                image_channels: c,
                node_channels: cn,
                embed: config.embed,
                hidden: config.hidden,
                attention: config.attention,
                source: config.attend_source,
            },
            &mut rng,
        );
        let perceptual = match perceptual {
            PerceptualSource::Random => {
                PerceptualExtractor::random(&mut store, PERCEPTUAL, config.perceptual_width, &mut rng)
            }
            PerceptualSource::File(p) => PerceptualExtractor::load(&mut store, PERCEPTUAL, p)?,
            PerceptualSource::Shapes(shapes) => placeholder_perceptual(&mut store, &shapes),
        };
        Ok(Self {
            config,
            vocabs,
            store,
            backbone,
            tree,
            generator,
            critic,
            captioner,
            perceptual,
        })
    }

    /// Writes config, vocabularies and every parameter group.
    pub fn write_checkpoint(&self, ckpt: &mut Checkpoint) -> Result<()> {
        ckpt.put_json("config", &self.config)?;
        ckpt.put_json("vocabs", &self.vocabs.to_lists())?;
        for group in GROUPS {
            let tensors: Vec<NamedTensor> = self
                .store
                .iter()
                .filter(|(_, p)| p.name.starts_with(group))
                .map(|(_, p)| NamedTensor {
                    name: p.name.clone(),
                    value: p.value.clone(),
                    frozen: p.frozen,
                })
                .collect();
            ckpt.put_tensors(section_name(group), &tensors);
        }
        Ok(())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: TrainConfig = ckpt.get_json("config")?;
        let vocabs = Vocabularies::from_lists(ckpt.get_json("vocabs")?)?;
        let groups: Vec<Vec<NamedTensor>> = GROUPS
            .iter()
            .map(|g| ckpt.get_tensors(section_name(g)))
            .collect::<Result<_>>()?;
        let shapes = groups[5]
            .iter()
            .filter(|t| t.name.ends_with(".weight"))
            .map(|t| t.value.shape().to_vec())
            .collect();
        let mut model = Self::assemble(config, vocabs, PerceptualSource::Shapes(shapes))?;
        let mut seen = 0;
        for t in groups.into_iter().flatten() {
            let id = model
                .store
                .id(&t.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", t.name)))?;
            let slot = model.store.get_mut(id);
            if slot.shape() != t.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    t.name,
                    t.value.shape(),
                    slot.shape()
                )));
            }
            *slot = t.value;
            model.store.set_frozen(id, t.frozen);
            seen += 1;
        }
        if seen != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "{seen} parameters stored, model has {}",
                model.store.len()
            )));
        }
        Ok(model)
    }

    /// Backbone features `V` for a batch `[n, 3, H, W]`.
    pub fn features(&self, images: &Tensor) -> Tensor {
        let g = Graph::new();
        let s = Session::new(&g, &self.store).with_trainable(Trainable::Nothing);
        self.backbone
            .forward(&s, s.constant(images.clone()))
            .value()
            .as_ref()
            .clone()
    }

    /// Restores, captions and classifies a batch of blurry images. Sizes
    /// that are not multiples of 4 are edge-padded and cropped back.
    pub fn infer(&self, images: &[&ImageTensor], strategy: Strategy, seed: u64) -> Result<Vec<Inference>> {
        let Some(first) = images.first() else {
            return Err(Error::EmptyInput("no images to infer".into()));
        };
        let (h, w, _) = first.dims();
        let padded: Vec<ImageTensor> = images.iter().map(|im| pad_to_multiple(im, 4)).collect();
        let batch = to_batch(&padded.iter().collect::<Vec<_>>())?;
        let g = Graph::new();
        let s = Session::new(&g, &self.store)
            .with_trainable(Trainable::Nothing)
            .with_training(false)
            .with_seed(seed);
        let x = s.constant(batch);
        let v = self.backbone.forward(&s, x);
        let bundle = s3tree::tree_forward(&s, v, &self.tree)?;
        let coupled = s3tree::couple_tree_maps(&bundle);
        let restored = deblur::generator_forward(&s, &self.generator, x, coupled)?;
        let h_v = captioner::pool_image_vector(&s, v, &self.captioner);
        let memory = captioner::node_memory(
            &s,
            &captioner::attention_inputs(&bundle, &self.captioner),
            &self.captioner,
        )?;
        let samples = captioner::generate(&s, h_v, &memory, &self.captioner, strategy, self.config.caption_len)?;
        let restored = restored.value();
        let mut out = Vec::with_capacity(images.len());
        for (i, sample) in samples.iter().enumerate() {
            let full = from_batch(&restored, i);
            let maps = bundle
                .maps
                .iter()
                .map(|m| m.value().index_axis(ndarray::Axis(0), i).to_owned())
                .collect();
            let probs = bundle
                .probs
                .iter()
                .map(|p| p.value().index_axis(ndarray::Axis(0), i).iter().copied().collect())
                .collect();
            out.push(Inference {
                restored: crop(&full, h, w),
                caption: self.vocabs.captions.decode(sample),
                node_maps: maps,
                node_probs: probs,
            });
        }
        Ok(out)
    }
}

/// Outputs for one image.
#[derive(Clone, Debug)]
pub struct Inference {
    pub restored: ImageTensor,
    pub caption: String,
    /// `H^j` as `[c', h', w']`, index `j - 1`.
    pub node_maps: Vec<Tensor>,
    /// Label distribution of each node, index `j - 1`.
    pub node_probs: Vec<Vec<f64>>,
}

/// Checkpoint section holding a parameter group.
pub fn section_name(group: &str) -> &str {
    group.trim_end_matches('.')
}

fn placeholder_perceptual(store: &mut ParamStore, shapes: &[Vec<usize>]) -> PerceptualExtractor {
    let convs = shapes
        .iter()
        .enumerate()
        .map(|(i, shape)| Conv {
            weight: store.insert(format!("{PERCEPTUAL}conv{i}.weight"), Tensor::zeros(shape.clone())),
            bias: Some(store.insert(format!("{PERCEPTUAL}conv{i}.bias"), Tensor::zeros(vec![shape[0]]))),
            geo: ConvGeometry::new(3, 1, 1),
        })
        .collect();
    store.freeze_prefix(PERCEPTUAL, true);
    PerceptualExtractor::Convs(convs)
}

fn pad_to_multiple(im: &ImageTensor, m: usize) -> ImageTensor {
    let (h, w, c) = im.dims();
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return im.clone();
    }
    ImageTensor::from_fn(ph, pw, c, |(y, x, k)| im.get(y.min(h - 1), x.min(w - 1), k))
}

fn crop(im: &ImageTensor, h: usize, w: usize) -> ImageTensor {
    if im.height() == h && im.width() == w {
        return im.clone();
    }
    ImageTensor::from_fn(h, w, im.channels(), |(y, x, k)| im.get(y, x, k))
}

/// Checks a batch of images has the configured size.
pub fn check_image_size(im: &ImageTensor, size: usize, id: &str) -> Result<()> {
    if im.height() != size || im.width() != size || im.channels() != 3 {
        return Err(shape_err!(
            "image {id} is {}×{}×{}, expected {size}×{size}×3",
            im.height(),
            im.width(),
            im.channels()
        ));
    }
    Ok(())
}
