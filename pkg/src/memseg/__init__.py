"""Confidence-driven memory retrieval and temporal-adapter blocks, embedded
in a synthetic continual-segmentation simulator."""

from .adapter import (
    AdapterParams,
    BlockParams,
    MlpParams,
    adapter_forward,
    adapter_params,
    block_backward,
    block_forward,
    block_params,
    grad_check,
)
from .fusion import FusionParams, fuse, fusion_params, structured_fusion_params
from .kernels import (
    AttentionParams,
    ShapeError,
    attention_params,
    conv3d,
    cosine_similarity,
    finite_diff_grad,
    gelu,
    layer_norm,
    linear,
    multi_head_attention,
    sigmoid,
    softmax,
)
from .memory import (
    BadMagicError,
    MemoryBase,
    MemoryEntry,
    MemoryFileError,
    ReplaceOutcome,
    RetrievalResult,
    ShapeInconsistencyError,
    TruncatedFileError,
    VersionMismatchError,
    insert_or_replace,
    load_base,
    new_base,
    retrieve_random,
    retrieve_topk,
    save_base,
    stats,
)
from .metrics import dice, iou
from .episode import (
    EpisodeReport,
    EpisodeSettings,
    MemoryConfig,
    make_tasks,
    run_episode,
)
from .pipeline import (
    EncoderConfig,
    PromptEmbedding,
    bbox_of,
    encode,
    encode_prompt,
    encode_stack,
    mask_feature,
    predict,
)
from .synth import (
    Frame,
    NoiseConfig,
    TaskSpec,
    gen_frame,
    preprocess_stream,
    shuffle_frames,
)

__version__ = "0.1.0"
