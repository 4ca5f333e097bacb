"""Ternary-weight transformers with hybrid low-bit activation quantization."""

from ternact.quantcore import (
    EPS,
    E2M1_GRID,
    Granularity,
    QuantScheme,
    QuantizedTensor,
    SchemeKind,
    dequantize,
    fake_quant,
    quantize,
    quantize_fp4_minmax,
    quantize_int4_absmean,
    quantize_int8_absmax,
    quantize_ternary,
    quantize_unsigned_absmax,
    round_clip,
)
from ternact.data import MarkovChain, MarkovDataConfig, batch_stream
from ternact.layers import (
    BitLinearLayer,
    KvCache,
    attention_forward,
    bitlinear_forward,
    ffn_forward,
    kv_fake_quant_values,
    relu2glu,
)
from ternact.metrics import (
    SparsityReport,
    activation_histogram,
    composed_up_sparsity,
    eval_perplexity,
    quant_error_report,
    sparsity_report,
)
from ternact.model import ModelConfig, Site, Stage, TransformerModel, model_forward
from ternact.sparsify import (
    TopKMask,
    gate_active_channels,
    kept_count,
    measure_sparsity,
    sparsify_then_quantize,
    topk_mask,
)
from ternact.tensorio import (
    load_checkpoint,
    load_quantized,
    load_tensor,
    save_checkpoint,
    save_quantized,
    save_tensor,
)
from ternact.train import (
    DivergenceMonitor,
    TrainerConfig,
    TrainLog,
    grad_check_ste,
    lr_schedule,
    run_two_stage,
    train_step,
)

__version__ = "0.1.0"

__all__ = [
    "EPS",
    "E2M1_GRID",
    "Granularity",
    "QuantScheme",
    "QuantizedTensor",
    "SchemeKind",
    "dequantize",
    "fake_quant",
    "quantize",
    "quantize_fp4_minmax",
    "quantize_int4_absmean",
    "quantize_int8_absmax",
    "quantize_ternary",
    "quantize_unsigned_absmax",
    "round_clip",
    "TopKMask",
    "gate_active_channels",
    "kept_count",
    "measure_sparsity",
    "sparsify_then_quantize",
    "topk_mask",
    "MarkovChain",
    "MarkovDataConfig",
    "batch_stream",
    "BitLinearLayer",
    "KvCache",
    "attention_forward",
    "bitlinear_forward",
    "ffn_forward",
    "kv_fake_quant_values",
    "relu2glu",
    "ModelConfig",
    "Site",
    "Stage",
    "TransformerModel",
    "model_forward",
    "SparsityReport",
    "activation_histogram",
    "composed_up_sparsity",
    "eval_perplexity",
    "quant_error_report",
    "sparsity_report",
    "load_checkpoint",
    "load_quantized",
    "load_tensor",
    "save_checkpoint",
    "save_quantized",
    "save_tensor",
    "DivergenceMonitor",
    "TrainerConfig",
    "TrainLog",
    "grad_check_ste",
    "lr_schedule",
    "run_two_stage",
    "train_step",
    "__version__",
]
