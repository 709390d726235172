"""texterase: a two-part GAN for erasing text from images.

Part 1 synthesizes features from a 256x256 view of the input through a
pyramid-transformer encoder and a three-branch decoder (high-pass map,
text segmentation, coarse text-free image); part 2 upscales to 512x512
conditioned on the segmentation map.  Both parts train jointly against
patch discriminators.
"""

from .backbone import (
    BackboneConfig,
    ConvPyramidBackbone,
    FeaturePyramid,
    PyramidTransformer,
    SRAttention,
    build_backbone,
    load_pretrained,
    register_backbone,
)
from .blocks import (
    AttentionFuse,
    BlockConfig,
    ConvBlock,
    PatchDiscriminator,
    QBlock,
    SEBlock,
    patch_logit_extent,
)
from .config import TrainConfig, load_config
from .data import (
    DatasetLoader,
    DatasetManifest,
    ManifestRecord,
    TextSpec,
    TrainingSample,
    laplacian_highpass,
    load_dataset,
    make_sample,
    read_manifest,
    synth_render,
    write_manifest,
)
from .errors import (
    ArchiveError,
    ConfigurationError,
    DataError,
    IncompatibleArchiveError,
    TexteraseError,
    TrainingError,
)
from .losses import (
    LossReport,
    LossWeights,
    g1_total,
    g2_total,
    gan_loss_part1,
    h_loss,
    s_loss,
    tf_loss,
)
from .metrics import (
    MetricsReport,
    builtin_text_detector,
    detector_eval,
    mse,
    psnr,
    ssim,
)
from .models import (
    FeatureSynthesisGenerator,
    ImagePairDiscriminator,
    ImageUpscaleGenerator,
    MaskImageDiscriminator,
    Part1Output,
    Part2Output,
)
from .train import (
    build_models,
    cosine_lr,
    evaluate,
    fit,
    load_checkpoint,
    save_checkpoint,
    train_step,
)

__version__ = "0.1.0"
