"""streamkv: a desk-scale streaming KV-cache engine with tiered offload,
margin-based selective recall, and an anticipatory decision loop."""

from .accounting import (AccountingInput, attention_activation_bytes,
                         chunk_reduction_factor, kv_cache_bytes,
                         mlp_activation_bytes, preset, report)
from .errors import (ConfigurationError, FrameLookupError, OrderingError,
                     PlanningError, ProtocolError, ScenarioError, ShapeError,
                     StorageError, StreamKVError, UsageError)
from .model import (ModelConfig, ProjectionWeights, TokenBlock, attend,
                    init_weights, make_block, project_qkv, softmax)
from .prefill import (ChunkPlan, Clip, PrefillState, WorkBufferMonitor,
                      prefill_chunk, prefill_clip, split_into_chunks)
from .recall import (LayerRecall, QueryDescriptor, RecallConfig, RecallResult,
                     answer_attention, query_descriptor, recall,
                     score_all_heads, score_frames, select_frames)
from .scenario import (Scenario, generate_stream, load_scenario,
                       make_question_block, parse_scenario, scenario_to_dict)
from .store import (OffloadReport, TieredKVStore, TierPolicy, UsageReport,
                    parse_cold_file)

__version__ = "0.1.0"
