//! The assembled detector and its checkpoint format.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::artifact::{
    extract_artifact, ArtifactEncoder, ArtifactEncoderState, ArtifactMap, PatchAutoencoder, ReconstructionBackend,
    StoredBackend,
};
use crate::augment::preprocess_input;
use crate::error::{Error, Result};
use crate::fusion::{FusionMode, FusionNetwork, FusionNetworkState};
use crate::raster::Image;
use crate::semantic::{CachedBackbone, EmbeddingCache, Normalized, SemanticBackbone, ToyBackbone, TOY_BACKBONE_SEED};
use crate::training::TrainConfig;

/// Environment variable naming the embedding cache directory.
pub const CACHE_ENV: &str = "SYNTHDETECT_CACHE";

/// Anything that assigns a synthetic score in `[0, 1]` to an image.
pub trait Scorer: Send + Sync {
    fn score(&self, image: &Image) -> Result<f64>;
}

impl<F> Scorer for F
where
    F: Fn(&Image) -> Result<f64> + Send + Sync,
{
    fn score(&self, image: &Image) -> Result<f64> {
        self(image)
    }
}

/// Which frozen semantic backbone to use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BackboneChoice {
    /// Built-in fixed-weight convolutional embedder.
    Toy { seed: u64 },
    /// Embeddings precomputed by an external encoder and stored in an
    /// [`EmbeddingCache`]. `dir` falls back to `$SYNTHDETECT_CACHE`.
    Cached {
        id: String,
        dim: usize,
        #[serde(default)]
        dir: Option<PathBuf>,
    },
}

impl Default for BackboneChoice {
    fn default() -> Self {
        BackboneChoice::Toy { seed: TOY_BACKBONE_SEED }
    }
}

pub fn build_backbone(choice: &BackboneChoice, normalize: bool) -> Result<Arc<dyn SemanticBackbone>> {
    let base: Arc<dyn SemanticBackbone> = match choice {
        BackboneChoice::Toy { seed } => {
            let b = ToyBackbone::new(*seed);
            if normalize {
                return Ok(Arc::new(Normalized(b)));
            }
            Arc::new(b)
        }
        BackboneChoice::Cached { id, dim, dir } => {
            let dir = match dir {
                Some(d) => d.clone(),
                None => std::env::var_os(CACHE_ENV)
                    .map(PathBuf::from)
                    .ok_or_else(|| Error::Config(format!("backbone `{id}` unavailable: set {CACHE_ENV}")))?,
            };
            let b = CachedBackbone {
                cache: EmbeddingCache::open(dir)?,
                id: id.clone(),
                dim: *dim,
            };
            if normalize {
                return Ok(Arc::new(Normalized(b)));
            }
            Arc::new(b)
        }
    };
    Ok(base)
}

/// Rebuilds the backbone named by a checkpoint.
fn backbone_from_id(id: &str, dim: usize, cache_dir: Option<&Path>) -> Result<Arc<dyn SemanticBackbone>> {
    let (base, normalize) = match id.strip_suffix("+l2") {
        Some(b) => (b, true),
        None => (id, false),
    };
    let choice = match ToyBackbone::seed_from_id(base) {
        Some(seed) => BackboneChoice::Toy { seed },
        None => BackboneChoice::Cached {
            id: base.to_string(),
            dim,
            dir: cache_dir.map(Path::to_path_buf),
        },
    };
    build_backbone(&choice, normalize)
}

/// Frozen backbone, reconstruction backend, artifact encoder and fusion
/// head.
#[derive(Clone)]
pub struct Detector {
    pub backbone: Arc<dyn SemanticBackbone>,
    pub backend: StoredBackend,
    backend_rt: Arc<dyn ReconstructionBackend>,
    pub encoder: ArtifactEncoder,
    pub fusion: FusionNetwork,
}

impl std::fmt::Debug for Detector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Detector")
            .field("backbone", &self.backbone.id())
            .field("backend", &self.backend_rt.id())
            .field("mode", &self.fusion.mode)
            .finish()
    }
}

impl Detector {
    pub fn new(
        backbone: Arc<dyn SemanticBackbone>,
        backend: StoredBackend,
        encoder: ArtifactEncoder,
        fusion: FusionNetwork,
    ) -> Result<Self> {
        if fusion.dim_sem != backbone.dim() {
            return Err(Error::DimensionMismatch(backbone.dim(), fusion.dim_sem));
        }
        if fusion.dim_art != encoder.dim() {
            return Err(Error::DimensionMismatch(encoder.dim(), fusion.dim_art));
        }
        let backend_rt = backend.as_backend();
        Ok(Self {
            backbone,
            backend,
            backend_rt,
            encoder,
            fusion,
        })
    }

    pub fn mode(&self) -> FusionMode {
        self.fusion.mode
    }

    pub fn reconstruction_backend(&self) -> &dyn ReconstructionBackend {
        self.backend_rt.as_ref()
    }

    /// `v_sem` of a preprocessed image, or empty if the mode ignores it.
    pub fn semantic_features(&self, x: &Image) -> Result<Vec<f64>> {
        if self.mode().uses_semantic() {
            self.backbone.embed(x)
        } else {
            Ok(Vec::new())
        }
    }

    pub fn artifact_map(&self, x: &Image) -> Result<ArtifactMap> {
        extract_artifact(x, self.backend_rt.as_ref())
    }

    /// `v_art` of a preprocessed image, or empty if the mode ignores it.
    pub fn artifact_features(&self, x: &Image) -> Result<Vec<f64>> {
        if self.mode().uses_artifact() {
            self.encoder.encode(&self.artifact_map(x)?)
        } else {
            Ok(Vec::new())
        }
    }

    /// Synthetic score of a raw image; no dropout.
    pub fn predict_score(&self, image: &Image) -> Result<f64> {
        let x = preprocess_input(image)?;
        let v_sem = self.semantic_features(&x)?;
        let v_art = self.artifact_features(&x)?;
        self.fusion.score(&v_sem, &v_art)
    }

    pub fn save(&self, path: &Path, config: Option<&TrainConfig>) -> Result<()> {
        save_checkpoint(self, config, path)
    }
}

impl Scorer for Detector {
    fn score(&self, image: &Image) -> Result<f64> {
        self.predict_score(image)
    }
}

pub const CHECKPOINT_FORMAT: &str = "synthdetect-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum BackendState {
    Identity,
    Patch { weights: PatchAutoencoder },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    backbone_id: String,
    backbone_dim: usize,
    backbone_checksum: String,
    backend: BackendState,
    encoder: ArtifactEncoderState,
    fusion: FusionNetworkState,
    #[serde(default)]
    train_config: Option<TrainConfig>,
}

pub fn save_checkpoint(detector: &Detector, config: Option<&TrainConfig>, path: &Path) -> Result<()> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        backbone_id: detector.backbone.id(),
        backbone_dim: detector.backbone.dim(),
        backbone_checksum: detector.backbone.checksum(),
        backend: match &detector.backend {
            StoredBackend::Identity => BackendState::Identity,
            StoredBackend::Patch(p) => BackendState::Patch { weights: p.clone() },
        },
        encoder: detector.encoder.state(),
        fusion: detector.fusion.state(),
        train_config: config.cloned(),
    };
    let text = serde_json::to_string(&file)?;
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Loads a checkpoint, rebuilding its backbone from the stored id. Cached
/// backbones read from `cache_dir` or `$SYNTHDETECT_CACHE`.
pub fn load_checkpoint(path: &Path, cache_dir: Option<&Path>) -> Result<Detector> {
    let file = read_checkpoint(path)?;
    let backbone = backbone_from_id(&file.backbone_id, file.backbone_dim, cache_dir)?;
    assemble(file, backbone, path)
}

/// Loads a checkpoint against an already constructed backbone, which must
/// match the one it was trained with.
pub fn load_checkpoint_with(path: &Path, backbone: Arc<dyn SemanticBackbone>) -> Result<Detector> {
    let file = read_checkpoint(path)?;
    assemble(file, backbone, path)
}

/// Training configuration stored alongside the weights, if any.
pub fn checkpoint_config(path: &Path) -> Result<Option<TrainConfig>> {
    Ok(read_checkpoint(path)?.train_config)
}

fn read_checkpoint(path: &Path) -> Result<CheckpointFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let corrupt = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    let value: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| corrupt(e.to_string()))?;
    if value.get("format").and_then(|f| f.as_str()) != Some(CHECKPOINT_FORMAT) {
        return Err(corrupt("not a detector checkpoint".into()));
    }
    let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    serde_json::from_value(value).map_err(|e| corrupt(e.to_string()))
}

fn assemble(file: CheckpointFile, backbone: Arc<dyn SemanticBackbone>, path: &Path) -> Result<Detector> {
    let corrupt = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if backbone.id() != file.backbone_id || backbone.dim() != file.backbone_dim {
        return Err(Error::BackboneMismatch {
            expected: backbone.id(),
            found: file.backbone_id,
        });
    }
    if backbone.checksum() != file.backbone_checksum {
        return Err(Error::BackboneMismatch {
            expected: format!("{} (weights {})", backbone.id(), &backbone.checksum()[..12]),
            found: format!("{} (weights {})", file.backbone_id, file.backbone_checksum.get(..12).unwrap_or("?")),
        });
    }
    let backend = match file.backend {
        BackendState::Identity => StoredBackend::Identity,
        BackendState::Patch { weights } => {
            weights.check()?;
            StoredBackend::Patch(weights)
        }
    };
    let encoder = file.encoder.restore().map_err(corrupt)?;
    let fusion = file.fusion.restore().map_err(corrupt)?;
    Detector::new(backbone, backend, encoder, fusion).map_err(|e| corrupt(e.to_string()))
}
