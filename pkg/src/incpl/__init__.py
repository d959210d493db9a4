"""Test-time in-context prompt adaptation for frozen dual-encoder classifiers."""

from .adaptation import (
    AdaptationConfig,
    AdaptationState,
    Counters,
    Prediction,
    StreamConfig,
    adapt_concurrent,
    adapt_text,
    adapt_visual,
    predict,
    run_stream,
)
from .backbone import (
    AdapterBackend,
    BackendConfig,
    Embedding,
    ImageSample,
    PatchTokens,
    ToyBackend,
    adapter_from_toy,
    loss_gradient,
)
from .context_store import (
    CandidatePool,
    ContextPair,
    ContextSet,
    SelectionStrategy,
    apply_label_mode,
    build_pool,
    sample_context,
)
from .data import DatasetManifest, load_image, load_manifest, write_manifest
from .errors import (
    ConfigurationError,
    InCPLError,
    NumericalFailureError,
    PromptKindError,
    ShapeMismatchError,
)
from .harness import (
    MatrixResult,
    SyntheticTaskSpec,
    emit_report,
    generate_synthetic,
    rerun_from_echo,
    run_matrix,
    zero_shot_predictions,
)
from .objective import (
    ClassProbabilities,
    LossBreakdown,
    class_probabilities,
    combined_loss,
    entropy_loss,
    supervised_loss,
)
from .prompts import (
    ClassVocabulary,
    PromptState,
    TextPrompt,
    VisualPrompt,
    apply_pixel_prompt,
    build_text_input,
    build_visual_input,
    build_vocabulary,
    init_prompt_state,
    reset_prompts,
)
from .report import RunReport, SampleRecord
from .token_net import TokenNetParams, init_token_net, load_token_net, save_token_net, translate

__version__ = "0.1.0"
