"""Audio-token reduction for decoder-only speech language models.

Weighted adjacent-token merging, baseline reduction policies, layer schedules,
transfer-entropy layer selection and FLOPs/latency/KV-cache accounting on a
small synthetic float64 decoder.
"""

from .bench import RunConfig, gen_fixture, load_config, make_sequence, run_once, run_sweep
from .kernels import cosine_similarity, make_rng, matmul, randn_matrix, softmax_rows
from .metrics import (
    RunReport,
    aggregate_run_flops,
    k_for_target_rate,
    kv_bytes,
    layer_flops,
    max_batch,
    reduction_rate,
    rtf,
    throughput,
)
from .policies import (
    POLICIES,
    MergePlan,
    ReducedState,
    ScheduledReduction,
    apply_policy,
    baseline_atome_merge,
    baseline_fastv_evict,
    baseline_random_evict,
    baseline_random_merge,
    build_merge_plan,
    compute_adjacent_similarity,
    compute_merge_weights,
    weighted_merge,
)
from .runtime import (
    KvCache,
    LayerTrace,
    ModelConfig,
    ModelWeights,
    NoOpHooks,
    RunTimings,
    Sequence,
    decode_step,
    generate,
    prefill,
)
from .schedule import (
    EntropyReport,
    Schedule,
    layer_entropy,
    make_constant_schedule,
    make_decay_schedule,
    make_single_layer_schedule,
    select_layer,
    transfer_entropy,
)

__version__ = "0.1.0"
