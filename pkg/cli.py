"""meshsim command-line interface."""

import argparse
import json
import logging
import os
import sys

from app.config import RUNTIME_CONFIG
from app.errors import MeshsimError

logger = logging.getLogger("meshsim")


def _read_json(path) -> object:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def _emit(payload) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True, default=str))


# ── Commands ─────────────────────────────────────────────────────────────

def cmd_gen_dataset(args) -> int:
    from app.services.dataset_service import DatasetSpec, gen_dataset, full_scale_spec, variant_spec

    if args.spec:
        spec = DatasetSpec.from_dict(_read_json(args.spec))
    elif args.full_scale:
        spec = full_scale_spec()
    else:
        spec = variant_spec(args.variant)
    dataset = gen_dataset(spec, args.out, workers=args.workers)
    _emit({"out": args.out, "samples": len(dataset.samples),
           "splits": {k: len(v) for k, v in dataset.splits.items()}, "metadata": dataset.metadata})
    return 0


def cmd_partition(args) -> int:
    from app.services.adaptive_mp import divide_mesh_graph
    from app.services.mesh_core import read_mesh

    graph, _ = read_mesh(args.mesh)
    partition = divide_mesh_graph(graph, args.K, seed=args.seed)
    payload = partition.to_dict()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump(payload, f)
    _emit({"K": partition.K, "group_sizes": partition.group_sizes().tolist(),
           "iterations": partition.iterations_used, "out": args.out})
    return 0


def cmd_tune_steps(args) -> int:
    from app.services.adaptive_mp import describe_schedule, partition_levels, tune_mp_steps
    from app.services.mesh_hierarchy import load_hierarchy

    multilevel = load_hierarchy(args.hierarchy)
    partitions = partition_levels(multilevel, args.K, args.seed)
    schedule = tune_mp_steps(multilevel, partitions, cap=args.cap)
    logger.info(describe_schedule(schedule))
    _emit({"R": schedule.R, "K": schedule.K, "steps": schedule.table(), "total": schedule.total()})
    return 0


def cmd_train(args) -> int:
    from app.services.dataset_service import load_dataset
    from app.services.training_service import RunConfig, run_and_store
    from models import session_for

    config = RunConfig.from_dict(_read_json(args.config))
    dataset = load_dataset(args.dataset)
    seeds = [args.seed] if args.seed is not None else list(config.seeds)
    db = session_for(args.out)
    results = []
    try:
        for seed in seeds:
            run = run_and_store(dataset, config, os.path.join(args.out, f"seed_{seed}"), seed, db=db)
            results.append({"run_id": run.run_id, "checkpoint": run.checkpoint_path,
                            "best_epoch": run.best_epoch, "best_val_rmse": run.best_val_rmse,
                            "test_rmse": run.test_rmse, "params": run.params, "flops": run.flops})
    finally:
        db.close()
    _emit({"runs": results})
    return 0


def cmd_eval(args) -> int:
    from app.services.checkpoint_service import dataset_path_of
    from app.services.dataset_service import load_dataset
    from app.services.training_service import evaluate

    dataset_path = args.dataset or dataset_path_of(args.checkpoint)
    _emit(evaluate(args.checkpoint, load_dataset(dataset_path), args.split))
    return 0


def cmd_ablate(args) -> int:
    from app.services.dataset_service import load_dataset
    from app.services.training_service import RunConfig, ablate, ablation_configs

    raw = _read_json(args.configs)
    if isinstance(raw, list):
        configs = [RunConfig.from_dict(entry) for entry in raw]
    else:
        raw = dict(raw)
        overrides = raw.pop("overrides", {})
        if "seeds" in overrides:
            overrides["seeds"] = tuple(overrides["seeds"])
        configs = ablation_configs(**raw, **overrides)
    seeds = args.seeds or None
    _emit(ablate(load_dataset(args.dataset), configs, args.out, seeds))
    return 0


def cmd_report(args) -> int:
    from app.services.report_service import report

    _emit(report(args.runs, args.csv))
    return 0


def cmd_serve(args) -> int:
    import uvicorn
    from app.routers import predict as predict_router
    from main import app

    if args.checkpoint:
        RUNTIME_CONFIG["checkpoint"] = args.checkpoint
    if RUNTIME_CONFIG["checkpoint"]:
        predict_router.load_predictor(RUNTIME_CONFIG["checkpoint"])
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


# ── Parser ───────────────────────────────────────────────────────────────

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="meshsim", description="Hierarchical mesh-graph surrogate toolkit.")
    parser.add_argument("--log-level", default=RUNTIME_CONFIG["log_level"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-dataset", help="Generate, solve and store a beam dataset.")
    source = p.add_mutually_exclusive_group()
    source.add_argument("--spec", help="DatasetSpec JSON file.")
    source.add_argument("--variant", default="default", help="Named dataset variant.")
    source.add_argument("--full-scale", action="store_true", help="Full 555-sample grid.")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("partition", help="Divide one mesh's directed edges into K direction groups.")
    p.add_argument("--mesh", required=True)
    p.add_argument("--K", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("tune-steps", help="Per-level, per-group MP step counts of a stored hierarchy.")
    p.add_argument("--hierarchy", required=True, help="hierarchy.json of a stored mesh hierarchy.")
    p.add_argument("--K", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cap", type=int, default=None)
    p.set_defaults(func=cmd_tune_steps)

    p = sub.add_parser("train", help="Train one run config.")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="RMSE of a checkpoint on one split.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", default=None, help="Dataset directory; defaults to the one the checkpoint was trained on.")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="Equal-budget comparison of several run configs.")
    p.add_argument("--configs", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, nargs="*", default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="CSV curves and final tables from every metrics database under --runs.")
    p.add_argument("--runs", required=True)
    p.add_argument("--csv", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("serve", help="Serve /predict for a checkpoint.")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--host", default="0.0.0.0")
    p.add_argument("--port", type=int, default=5000)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (MeshsimError, ValueError, KeyError, OSError) as e:
        logger.debug("command failed", exc_info=True)
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
