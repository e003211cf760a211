"""Reference-based foreign accent conversion pipeline.

A multi-task acoustic model (posteriorgram + tract-variable heads over a
shared BiLSTM trunk) supplies bottleneck features to a speaker- and
prosody-conditioned seq2seq mel synthesizer; objective evaluation covers
mel cepstral distortion, word error rate, and speaker-embedding centroid
analysis. All pretrained components sit behind provider interfaces with
deterministic mocks, so everything here runs at desk scale.
"""

__version__ = "0.1.0"

from .audio import Waveform, read_wav, write_wav
from .corpus import (
    DataSplits,
    UtteranceRecord,
    build_splits,
    find_parallel_reference,
    load_manifest,
    normalize_transcript,
    segment_waveform,
)
from .features import (
    FrameSequence,
    MelSpectrogram,
    PosteriorgramTrack,
    TractVariableTrack,
    TvNormalizationStats,
    UpstreamEmbedding,
    compute_mel,
    fit_tv_normalization,
    normalize_tv_channels,
    read_feature_cache,
    write_feature_cache,
)
from .acoustic_model import (
    AcousticModelConfig,
    BottleneckFeatures,
    CombinedLossReport,
    LossWeights,
    MultiTaskAcousticModel,
    MultiTaskOutput,
    build_model,
    combined_loss,
    extract_bnf,
    make_variant,
    run_forward,
    upsample_frames,
)
from .trainer import (
    EarlyStopState,
    GridSearchSpace,
    OptimizerSpec,
    ScheduleSpec,
    TrainingExample,
    early_stop_update,
    fit,
    grid_search_alpha,
    lr_at_epoch,
)
from .conversion import (
    ConversionBundle,
    ConversionRequest,
    ProsodyEmbedding,
    SpeakerEmbedding,
    convert,
    encode_prosody,
    encode_speaker,
    synthesize,
    train_synth_step,
    vocode,
)
from .evaluation import (
    MCDResult,
    WERResult,
    centroid_report,
    dtw_align,
    mcd,
    mel_cepstra,
    ppmc,
    transcribe,
    wer,
)
