"""``remote-fusion`` command line.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .checkpoint import CheckpointError
from .config import RunConfig
from .encoder import ConfigError, DataError, read_jsonl, write_jsonl, write_relation_vocab
from .ot import NumericalError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("remote_fusion")


def _load_config(path) -> RunConfig:
    return RunConfig.load(path) if path else RunConfig()


def _read_data(path):
    try:
        return read_jsonl(path)
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc


def relations_path(data_path) -> Path:
    p = Path(data_path)
    return p.with_name(p.stem + ".relations.json")


def cmd_generate(args) -> int:
    from .synthetic import generate_synthetic

    config = _load_config(args.config)
    records = generate_synthetic(config, args.n, args.seed)
    write_jsonl(args.out, records)
    write_relation_vocab(relations_path(args.out), config.relations)
    log.info("wrote %d samples to %s", len(records), args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import evaluate, save_model, split_records, train, write_history, write_metrics

    config = _load_config(args.config)
    if args.steps is not None:
        config = config.replace(steps=args.steps)
    records = _read_data(args.data)
    train_recs, held = split_records(records, config.eval_fraction)
    if not train_recs:
        raise DataError(f"{args.data}: no samples left for training after the eval split")
    log.info("training on %d samples, holding out %d", len(train_recs), len(held))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def progress(step, value):
        if step % 100 == 0:
            log.info("step %d loss %.4f", step, value)

    result = train(config, train_recs, progress=progress)
    save_model(out / "final", result.model)
    write_history(out / "metrics.csv", result.history)
    (out / "config.json").write_text(config.to_json() + "\n")
    if held:
        write_metrics(out / "heldout_metrics.json", evaluate(result.model, held).metrics)
    log.info("checkpoint written to %s", out / "final")
    return EXIT_OK


def _model_for_eval(args):
    from .train import load_model

    model = load_model(args.ckpt)
    changes = {}
    if getattr(args, "disable_mot", False):
        changes["disable_mot"] = True
    if getattr(args, "disable_mmoe", False):
        changes["disable_mmoe"] = True
    variant = getattr(args, "mot_variant", None)
    if variant and variant != model.config.mot_variant:
        # the two variants own different parameters, so each needs its own training run
        raise ConfigError(
            f"checkpoint was trained with mot_variant={model.config.mot_variant}; train a separate model for {variant}"
        )
    if changes:
        from .model import RemoteModel

        state = model.state_dict()
        model = RemoteModel(model.config.replace(**changes))
        model.load_state_dict(state)
    return model


def _select_split(records, config, split):
    if split == "all":
        return records
    from .train import split_records

    train_recs, held = split_records(records, config.eval_fraction)
    return train_recs if split == "train" else held


def cmd_eval(args) -> int:
    from .train import evaluate, write_expert_weights, write_metrics, write_plans, write_predictions

    model = _model_for_eval(args)
    records = _select_split(_read_data(args.data), model.config, args.split)
    result = evaluate(model, records, keep_plans=bool(args.dump_plans))
    metrics = result.metrics.to_dict()
    if args.metrics:
        write_metrics(args.metrics, result.metrics)
    if args.predictions:
        write_predictions(args.predictions, result.predictions)
    if args.dump_expert_weights:
        write_expert_weights(args.dump_expert_weights, result.expert_rows, model.config.n_experts)
    if args.dump_plans:
        write_plans(args.dump_plans, result.plans)
    print(json.dumps(metrics, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .gradcheck import grad_check, tiny_config

    config = RunConfig.load(args.config) if args.config else tiny_config()
    report = grad_check(config, seed=args.seed)
    for line in report.lines():
        print(line)
    return EXIT_OK if report.passed else EXIT_NUMERIC


def cmd_inspect_plan(args) -> int:
    from .model import collate
    from .tensor import no_grad
    from .train import write_plans

    model = _model_for_eval(args)
    if model.config.disable_mot or model.config.mot_variant != "optimal_transport":
        raise ConfigError("inspect-plan needs the optimal-transport MOT variant enabled")
    matches = [r for r in _read_data(args.data) if r.sample_id == args.sample_id]
    if not matches:
        raise DataError(f"sample {args.sample_id!r} not found in {args.data}")
    rec = matches[0]
    with no_grad():
        out = model.forward(collate([rec], model.config), training=False)
    plans = []
    for (mod, level), pb in sorted(out.plans.items()):
        if args.modality and mod != args.modality:
            continue
        if args.level is not None and level != args.level:
            continue
        if mod == "text":
            plans.append((rec.sample_id, mod, level, None, pb.instance(0)))
        else:
            plans.extend((rec.sample_id, mod, level, k, pb.instance(k)) for k in range(len(rec.objects)))
    for base in write_plans(args.out, plans):
        print(base + ".csv")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="remote-fusion", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset (JSONL) and its relation vocabulary")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train on the non-held-out part of a dataset")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory (final, metrics.csv, config.json)")
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_train)

    def ablations(q):
        q.add_argument("--disable-mot", action="store_true")
        q.add_argument("--disable-mmoe", action="store_true")
        q.add_argument("--mot-variant", choices=["optimal_transport", "cross_attention"])

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["all", "train", "eval"], default="all")
    p.add_argument("--metrics", help="metrics JSON path")
    p.add_argument("--predictions", help="prediction JSONL path")
    p.add_argument("--dump-expert-weights")
    p.add_argument("--dump-plans")
    ablations(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check", help="finite-difference gradient check on a tiny config")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("inspect-plan", help="dump the transport plans for one sample")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sample-id", required=True)
    p.add_argument("--out", default="plans")
    p.add_argument("--modality", choices=["text", "vision"])
    p.add_argument("--level", type=int)
    ablations(p)
    p.set_defaults(func=cmd_inspect_plan)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
