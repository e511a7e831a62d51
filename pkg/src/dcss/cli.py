"""Command-line entry point: dcss {gen-data, pretrain-cas, train, eval, report}."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import DCSSError, ValidationError


def _read_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"{path} does not exist")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path} is not valid JSON: {e}") from None


def cmd_gen_data(args) -> int:
    from .synth_data import DatasetSpec, build_schedule, generate_dataset, save_dataset

    raw = _read_json(args.spec)
    schedule_pattern = raw.pop("schedule", None)
    spec = DatasetSpec.from_json(raw)
    samples = generate_dataset(spec)
    schedule = build_schedule(spec.num_classes, schedule_pattern) if schedule_pattern else None
    save_dataset(args.out, spec, samples, schedule)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def cmd_pretrain_cas(args) -> int:
    from .cas import PretrainConfig, pretrain_segmenter
    from .pretrained import load_grounder
    from .synth_data import class_agnostic_pairs, load_dataset

    _, samples, _ = load_dataset(args.data)
    grounder = load_grounder(args.backbone)
    cfg = PretrainConfig(steps=args.steps, seed=args.seed)
    seg, report = pretrain_segmenter(class_agnostic_pairs(samples), grounder, cfg,
                                     log=None if args.quiet else print)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    seg.save(args.out)
    print(json.dumps({**report, "checksum": seg.checksum()}))
    return 0


def cmd_train(args) -> int:
    from .config import ExperimentConfig
    from .experiment import run_experiment

    config = ExperimentConfig.from_dict(_read_json(args.config))
    res = run_experiment(config, args.out, save_checkpoints=not args.no_checkpoints)
    print(json.dumps(res["report"]["final"], sort_keys=True))
    return 0


def _dump_affinity(state, samples, task_ids, out_dir):
    import torch

    from .detect import affinity
    from .harness import task_forward
    from .text_bank import aggregate_batch

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    image = torch.from_numpy(samples[0].image[None].astype(np.float32))
    with torch.no_grad():
        for t in task_ids:
            task = state.task(t)
            view = state.registry.view(t)
            out = task_forward(state, image, task, view)
            vt = state.grounder.encoder(image, view)
            E = aggregate_batch(state.bank_tensor(task.class_ids), vt.cls)
            fused = state.grounder.fusion(vt.tokens, E, view)
            S = affinity(fused.V, fused.E)[0].double().numpy()
            header = ",".join(f"class_{c}" for c in task.class_ids)
            np.savetxt(out_dir / f"task_{t}_S.csv", S, delimiter=",", header=header, comments="", fmt="%.8f")
            np.savetxt(out_dir / f"task_{t}_S_sparse.csv", out.S_sparse[0].double().numpy(), delimiter=",",
                       header=header, comments="", fmt="%.8f")


def cmd_eval(args) -> int:
    from .experiment import evaluate, make_data
    from .harness import load_state
    from .synth_data import build_schedule, load_dataset

    ckpt = Path(args.run) / "checkpoints" / f"task_{args.task}"
    state = load_state(ckpt)
    config = state.config
    schedule = build_schedule(config.num_classes, config.schedule)
    if args.data:
        _, samples, _ = load_dataset(args.data)
    else:
        _, _, samples = make_data(config)
    metrics = evaluate(state, samples, schedule, args.task)
    if args.dump_affinity:
        _dump_affinity(state, samples, [t.task_index for t in state.learned_tasks], args.dump_affinity)
    print(json.dumps(metrics.to_json(), sort_keys=True))
    return 0


def cmd_report(args) -> int:
    from .experiment import metrics_csv

    report = _read_json(Path(args.run) / "metrics.json")
    if args.format == "csv":
        sys.stdout.write(metrics_csv(report))
    else:
        print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dcss", description="Continual semantic segmentation on synthetic shapes.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset from a JSON spec")
    g.add_argument("--spec", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    c = sub.add_parser("pretrain-cas", help="pretrain and freeze the promptable segmenter")
    c.add_argument("--data", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--backbone", default=None, help="frozen backbone file (default: packaged fixture)")
    c.add_argument("--steps", type=int, default=1500)
    c.add_argument("--seed", type=int, default=11)
    c.add_argument("--quiet", action="store_true")
    c.set_defaults(func=cmd_pretrain_cas)

    t = sub.add_parser("train", help="run the continual schedule from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--no-checkpoints", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a run checkpoint after task K")
    e.add_argument("--run", required=True)
    e.add_argument("--task", type=int, required=True)
    e.add_argument("--data", default=None, help="dataset directory (default: the run's test split)")
    e.add_argument("--dump-affinity", metavar="DIR", default=None,
                   help="write dense and sparsified affinity matrices of the first image as CSV")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="print a run's metrics")
    r.add_argument("--run", required=True)
    r.add_argument("--format", choices=("csv", "json"), default="json")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except DCSSError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except (FileNotFoundError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return ValidationError.exit_code


if __name__ == "__main__":
    sys.exit(main())
