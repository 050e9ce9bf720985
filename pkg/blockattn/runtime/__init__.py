from .scheduler import (
	DIRECT,
	WORK_ITEM_FIELDS,
	WorkloadSpec,
	WorkItem,
	MergeEntry,
	Plan,
	WorkspaceBounds,
	WorkspaceLayout,
	Section,
	select_tile_size,
	compute_kv_chunk_limit,
	build_plan,
	baseline_schedule,
	estimate_workspace,
)
from .workspace import Workspace, PlanCache
from .engine import (
	Engine,
	EngineBounds,
	PlanHandle,
	CompositePlanHandle,
	contraction,
)
