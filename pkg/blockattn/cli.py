"""`blockattn` command line: verify, bench, plan-dump and gen.

Reports go to stdout as JSON, logs to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from blockattn import __version__
from blockattn.attention import VariantNames, VariantSpec, variant_from_params
from blockattn.bench import Distributions, Modes, WorkloadProfile, bench, generate_workload, verify
from blockattn.config import Defaults
from blockattn.core.io import load_json, save_tensor
from blockattn.runtime import build_plan

logger = logging.getLogger(__name__)

# Exit codes
EXIT_OK = 0
EXIT_FAILED = 1
EXIT_ERROR = 2

## ------ Arguments ------ ##
def _add_workload_args(p:argparse.ArgumentParser) -> None:
	p.add_argument("--profile", default=None, help="Workload profile as inline JSON or a JSON file")
	p.add_argument("--distribution", choices=Distributions.ALL, default=None)
	p.add_argument("--length", type=int, default=None, help="Constant KV length")
	p.add_argument("--lo", type=int, default=None, help="Uniform lower bound (inclusive)")
	p.add_argument("--hi", type=int, default=None, help="Uniform upper bound (inclusive)")
	p.add_argument("--mean", type=float, default=None, help="Zipf mean KV length")
	p.add_argument("--batch-size", type=int, default=None)
	p.add_argument("--mode", choices=Modes.ALL, default=None)
	p.add_argument("--seed", type=int, default=None)
	p.add_argument("--num-qo-heads", type=int, default=None)
	p.add_argument("--num-kv-heads", type=int, default=None)
	p.add_argument("--head-dim", type=int, default=None)
	p.add_argument("--page-size", type=int, default=None)
	p.add_argument("--num-ctas", type=int, default=1)

def _add_variant_args(p:argparse.ArgumentParser) -> None:
	p.add_argument("--variant", default=VariantNames.VANILLA,
		help=f"One of {VariantNames.ALL}, or JSON such as '{{\"variant\": \"softcap\", \"cap\": 30}}'")
	p.add_argument("--num-workers", type=int, default=None,
		help=f"Worker threads (default: ${Defaults.num_workers_env} or the CPU count)")

def build_parser() -> argparse.ArgumentParser:
	parser = argparse.ArgumentParser(prog="blockattn", description="Block-sparse attention engine harness")
	parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
	parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
	sub = parser.add_subparsers(dest="command", required=True)

	p = sub.add_parser("verify", help="Compare the engine against the oracle")
	_add_workload_args(p)
	_add_variant_args(p)
	p.add_argument("--double", action="store_true", help="Run the engine in double precision")
	p.add_argument("--tolerance", type=float, default=None)
	p.add_argument("--corrupt-merge", action="store_true", help="Negative control: corrupt the merge map")

	p = sub.add_parser("bench", help="Balance reports and wall time")
	_add_workload_args(p)
	_add_variant_args(p)
	p.add_argument("--repeats", type=int, default=Defaults.bench_repeats)
	p.add_argument("--warmup", type=int, default=Defaults.bench_warmup)

	p = sub.add_parser("plan-dump", help="Print the plan of a workload")
	_add_workload_args(p)

	p = sub.add_parser("gen", help="Write Q/K/V as FIKV files plus workload.json")
	_add_workload_args(p)
	p.add_argument("--out", required=True, help="Output directory")
	return parser

def profile_from_args(args:argparse.Namespace) -> WorkloadProfile:
	"""Profile JSON (if any) with explicit flags layered on top."""
	data: dict[str, Any] = dict(load_json(args.profile)) if args.profile else {}
	params = dict(data.get("params", {}))
	for key in ("length", "lo", "hi", "mean"):
		value = getattr(args, key)
		if value is not None:
			params[key] = value
	if params:
		data["params"] = params
	for key in ("distribution", "batch_size", "mode", "seed", "num_qo_heads", "num_kv_heads", "head_dim", "page_size"):
		value = getattr(args, key)
		if value is not None:
			data[key] = value
	return WorkloadProfile.from_dict(data)

def variant_from_arg(text:str, num_qo_heads:int) -> VariantSpec:
	params = {"variant": text} if text in VariantNames.ALL else load_json(text)
	if not isinstance(params, dict):
		raise ValueError(f"Variant JSON must be an object, got {type(params).__name__}")
	return variant_from_params(params, num_qo_heads=num_qo_heads)

## ------ Commands ------ ##
def _emit(report:dict[str, Any]) -> None:
	json.dump(report, sys.stdout, indent=2)
	sys.stdout.write("\n")

def cmd_verify(args:argparse.Namespace) -> int:
	profile = profile_from_args(args)
	report = verify(
		profile,
		variant_from_arg(args.variant, profile.num_qo_heads),
		args.num_ctas,
		dtype=np.float64 if args.double else np.float32,
		num_workers=args.num_workers,
		tolerance=args.tolerance,
		corrupt_merge=args.corrupt_merge,
	)
	_emit({"profile": profile.to_dict(), **report.to_dict()})
	return EXIT_OK if report.passed else EXIT_FAILED

def cmd_bench(args:argparse.Namespace) -> int:
	profile = profile_from_args(args)
	result = bench(
		profile,
		variant_from_arg(args.variant, profile.num_qo_heads),
		args.num_ctas,
		args.repeats,
		warmup=args.warmup,
		num_workers=args.num_workers,
	)
	_emit({"profile": profile.to_dict(), **result.to_dict()})
	return EXIT_OK

def cmd_plan_dump(args:argparse.Namespace) -> int:
	workload = generate_workload(profile_from_args(args))
	plan = build_plan(workload.spec(args.num_ctas))
	_emit(plan.to_dict())
	return EXIT_OK

def cmd_gen(args:argparse.Namespace) -> int:
	profile = profile_from_args(args)
	workload = generate_workload(profile)
	out = Path(args.out)
	files = {
		"q": save_tensor(out / "q.fikv", workload.q.data),
		"k": save_tensor(out / "k.fikv", workload.k.data),
		"v": save_tensor(out / "v.fikv", workload.v.data),
	}
	meta = {
		"profile": profile.to_dict(),
		"qo_lens": workload.qo_lens.tolist(),
		"kv_lens": workload.kv_lens.tolist(),
		"files": {name: p.name for name, p in files.items()},
	}
	(out / "workload.json").write_text(json.dumps(meta, indent=2))
	_emit({"out": str(out), **meta})
	return EXIT_OK

COMMANDS = {
	"verify": cmd_verify,
	"bench": cmd_bench,
	"plan-dump": cmd_plan_dump,
	"gen": cmd_gen,
}

def main(argv:Sequence[str]|None=None) -> int:
	args = build_parser().parse_args(argv)
	logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
	try:
		return COMMANDS[args.command](args)
	except (ValueError, KeyError, IOError) as e:
		logger.debug("Command %s failed", args.command, exc_info=True)
		print(f"blockattn {args.command}: error: {e}", file=sys.stderr)
		return EXIT_ERROR

if __name__ == "__main__":
	sys.exit(main())
