from .state import (
	AttentionState,
	ScaleFreeState,
	HeadConfig,
	lse_of_scores,
	attention_state,
	merge,
	merge_arrays,
	merge_all,
	operational_intensity,
)
from .variants import (
	VariantNames,
	VariantSpec,
	IndexContext,
	ScoredTile,
	apply_pipeline,
	apply_epilogue,
	transform_query,
	check_heads,
	score_tile,
	builtin_vanilla,
	builtin_causal,
	builtin_softcap,
	builtin_sliding_window,
	builtin_alibi,
	builtin_sigmoid,
	builtin_fused_rope,
	alibi_slopes,
	with_causal,
	variant_from_params,
)
from .streaming import KvTile, streaming_tile_attention
from .oracle import OracleResult, oracle_attention
