from .ragged import RaggedTensor, FusionMap, fuse_head_groups
from .bsr import KvPool, BsrMatrix, gather_tile, tile_query_rows, bsr_from_ragged
from .paged import RequestPages, PagedKvCache, page_table_to_bsr
from .composable import (
	FormatRoles,
	RowPositions,
	ComposablePart,
	ComposableFormat,
	decompose_shared_prefix,
)
