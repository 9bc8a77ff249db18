"""Command-line pipeline: dataset generation, training, evaluation, the
four-variant ablation sweep, and the finite-difference gradient check.

Configuration is a strict-schema JSON file; CLI flags override config keys
and the effective merged config is echoed next to every output. Exit codes:
0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import statistics
import sys

import numpy as np

from . import data as D
from . import gradcheck as GC
from . import model as M
from . import train as TR
from .errors import ConfigError, DataError, NumericError
from .metrics import build_report

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

# Schema: section -> key -> (type(s), default). Unknown keys are rejected.
_SCHEMA = {
    None: {
        "seed": (int, 0),
        "dataset_dir": (str, "dataset"),
        "out_dir": (str, "out"),
        "split_regime": (str, "iid"),
        "zero_regions": (bool, False),
        "glove_path": ((str, type(None)), None),
        "ablate_seeds": (list, [0, 1, 2]),
        "vocab_rule": (dict, {"min_count": 9}),
    },
    "data": {
        "num_scenes": (int, 2000),
        "max_objects": (int, 6),
        "per_family": (int, 1),
        "noise_sigma": (float, 0.1),
        "visual_dim": (int, 2048),
        "num_regions": (int, 15),
        "heldout_pair_count": (int, 6),
        "tv_target": (float, 0.3),
        "test_scene_share": (float, 0.15),
    },
    "model": {
        "question_dim": (int, 1024),
        "projector_width": (int, 1024),
        "aggregator_hidden": (int, 1024),
        "pre_classifier_width": (int, 2048),
        "embed_dim": (int, 300),
        "ablation": (str, "full"),
    },
    "trainer": {
        "batch_size": (int, 64),
        "max_epochs": (int, 20),
        "early_stop_patience": (int, 5),
        "precision": (str, "float32"),
        "loss": (str, "softmax"),
    },
    "schedule": {
        "warmup_epochs": (int, 4),
        "warmup_slope": (float, 2.5e-4),
        "plateau_lr": (float, 5e-4),
        "plateau_until_epoch": (int, 10),
        "decay_factor": (float, 0.25),
        "decay_every": (int, 2),
    },
}


def _check_section(section_name, raw, schema):
    where = f"section {section_name!r}" if section_name else "top level"
    out = {}
    for key in raw:
        if key not in schema:
            raise ConfigError(f"unknown config key {key!r} at {where}")
    for key, (types, default) in schema.items():
        value = raw.get(key, default)
        if isinstance(types, tuple):
            ok = isinstance(value, types)
        else:
            ok = isinstance(value, types)
            if types is float and isinstance(value, int) and not isinstance(value, bool):
                value, ok = float(value), True
        if isinstance(value, bool) and types is int:
            ok = False
        if not ok:
            raise ConfigError(f"config key {key!r} at {where}: expected {types}, got {value!r}")
        out[key] = value
    return out


def load_config(path) -> dict:
    """Parse and validate a run-config JSON file against the strict schema."""
    if path is None:
        raw = {}
    else:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc.msg}")
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    cfg = {}
    for key in raw:
        if key not in _SCHEMA[None] and key not in _SCHEMA:
            raise ConfigError(f"unknown config key {key!r} at top level")
    cfg.update(_check_section(None, {k: v for k, v in raw.items() if k in _SCHEMA[None]}, _SCHEMA[None]))
    for section in ("data", "model", "trainer", "schedule"):
        sub = raw.get(section, {})
        if not isinstance(sub, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        cfg[section] = _check_section(section, sub, _SCHEMA[section])
    if set(cfg["vocab_rule"]) not in ({"min_count"}, {"top_k"}):
        raise ConfigError("vocab_rule must be {'min_count': k} or {'top_k': k}")
    if cfg["split_regime"] not in ("iid", "compositional", "changing_priors"):
        raise ConfigError(f"unknown split_regime {cfg['split_regime']!r}")
    if cfg["model"]["ablation"] not in M.ABLATIONS:
        raise ConfigError(f"unknown ablation {cfg['model']['ablation']!r}")
    return cfg


def _apply_overrides(cfg: dict, args) -> dict:
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "ablation", None) is not None:
        if args.ablation not in M.ABLATIONS:
            raise ConfigError(f"unknown ablation {args.ablation!r}")
        cfg["model"]["ablation"] = args.ablation
    if getattr(args, "split_regime", None) is not None:
        if args.split_regime not in ("iid", "compositional", "changing_priors"):
            raise ConfigError(f"unknown split_regime {args.split_regime!r}")
        cfg["split_regime"] = args.split_regime
    return cfg


def _echo_config(cfg: dict, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "effective_config.json"), "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# shared pipeline pieces


def _corpus_config(cfg: dict) -> D.CorpusConfig:
    d = cfg["data"]
    return D.CorpusConfig(
        num_scenes=d["num_scenes"],
        max_objects=d["max_objects"],
        per_family=d["per_family"],
        seed=cfg["seed"],
        regime=cfg["split_regime"],
        heldout_pair_count=d["heldout_pair_count"],
        tv_target=d["tv_target"],
        test_scene_share=d["test_scene_share"],
    )


def _build_vocab(cfg: dict, items) -> D.AnswerVocab:
    rule = cfg["vocab_rule"]
    if "min_count" in rule:
        counted = [it for it in items if it.split in ("train", "val")]
    else:
        counted = [it for it in items if it.split == "train"]
    return D.build_answer_vocab(counted, rule)


def _load_dataset(cfg: dict):
    path = cfg["dataset_dir"]
    if not os.path.isdir(path):
        raise DataError(f"dataset directory not found: {path} (run gen-data first)")
    return D.read_dataset(path)


def _build_model_and_data(cfg: dict, items, scenes):
    d = cfg["data"]
    vocab = _build_vocab(cfg, items)
    data = TR.TrainData.build(
        items,
        scenes,
        vocab,
        feat_seed=cfg["seed"],
        noise_sigma=d["noise_sigma"],
        visual_dim=d["visual_dim"],
        num_regions=d["num_regions"],
        zero_regions=cfg["zero_regions"],
    )
    m = cfg["model"]
    model_cfg = M.RamenConfig(
        num_answers=len(vocab),
        vocab_size=len(D.VOCAB),
        visual_dim=d["visual_dim"],
        spatial_dim=2 * M.SPATIAL_GRID**2,
        question_dim=m["question_dim"],
        projector_width=m["projector_width"],
        aggregator_hidden=m["aggregator_hidden"],
        pre_classifier_width=m["pre_classifier_width"],
        embed_dim=m["embed_dim"],
        ablation=m["ablation"],
    )
    t = cfg["trainer"]
    trainer_cfg = TR.TrainerConfig(
        batch_size=t["batch_size"],
        max_epochs=t["max_epochs"],
        early_stop_patience=t["early_stop_patience"],
        seed=cfg["seed"],
        precision=t["precision"],
        loss=t["loss"],
    )
    schedule = TR.Schedule(**cfg["schedule"])
    embedding_init = None
    if cfg["glove_path"]:
        from . import nn

        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg["seed"], 21])))
        embedding_init = nn.load_embedding_text(
            cfg["glove_path"], list(D.VOCAB), m["embed_dim"], rng
        )
    model = M.RamenModel(
        model_cfg,
        seed=cfg["seed"],
        dtype=trainer_cfg.dtype,
        embedding_init=embedding_init,
    )
    return model, data, trainer_cfg, schedule


def _report_json(model, data, splits) -> dict:
    out = {}
    for split in splits:
        _, records = TR.evaluate(model, data, split)
        out[split] = json.loads(build_report(records).to_json())
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: dict) -> int:
    items, scenes, info = D.generate_corpus(_corpus_config(cfg))
    path = cfg["dataset_dir"]
    D.write_dataset(items, scenes, path)
    manifest = {
        "config": cfg,
        "split_info": info,
        "statistics": D.corpus_statistics(items),
    }
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {len(items)} items / {len(scenes)} scenes to {path}")
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    items, scenes = _load_dataset(cfg)
    model, data, trainer_cfg, schedule = _build_model_and_data(cfg, items, scenes)
    out_dir = cfg["out_dir"]
    _echo_config(cfg, out_dir)
    result = TR.train(
        model,
        data,
        trainer_cfg,
        schedule,
        checkpoint_path=os.path.join(out_dir, "checkpoint_last.npz"),
    )
    TR.write_learning_curve(result.history, os.path.join(out_dir, "learning_curve.csv"))
    if result.best_params is not None:
        TR.apply_params(model, result.best_params)
        state = TR.AdamaxState.init(model.parameters())
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg["seed"], 11])))
        TR.save_checkpoint(
            model, state, os.path.join(out_dir, "checkpoint_best.npz"),
            epoch=result.best_epoch, rng=rng,
            best_epoch=result.best_epoch, best_val_acc=result.best_val_acc,
        )
    report = {
        "best_epoch": result.best_epoch,
        "best_val_acc": result.best_val_acc,
        "metrics": _report_json(model, data, ("val", "test")),
    }
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(
        f"best val accuracy {result.best_val_acc:.4f} at epoch {result.best_epoch}; "
        f"artifacts in {out_dir}"
    )
    return EXIT_OK


def cmd_eval(cfg: dict, checkpoint) -> int:
    items, scenes = _load_dataset(cfg)
    model, data, _, _ = _build_model_and_data(cfg, items, scenes)
    loaded, _, meta = TR.load_checkpoint(checkpoint, expect_config=model.config)
    TR.apply_params(model, TR.snapshot_params(loaded))
    out_dir = cfg["out_dir"]
    _echo_config(cfg, out_dir)
    report = _report_json(model, data, ("val", "test"))
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for split in ("val", "test"):
        print(f"{split}: simple={report[split]['overall']['simple']:.4f}")
    return EXIT_OK


def cmd_ablate(cfg: dict) -> int:
    items, scenes = _load_dataset(cfg)
    out_dir = cfg["out_dir"]
    _echo_config(cfg, out_dir)
    seeds = cfg["ablate_seeds"]
    rows = []
    for variant in M.ABLATIONS:
        for seed in seeds:
            run_cfg = json.loads(json.dumps(cfg))  # deep copy
            run_cfg["model"]["ablation"] = variant
            run_cfg["seed"] = int(seed)
            model, data, trainer_cfg, schedule = _build_model_and_data(run_cfg, items, scenes)
            result = TR.train(model, data, trainer_cfg, schedule)
            if result.best_params is not None:
                TR.apply_params(model, result.best_params)
            val_acc, _ = TR.evaluate(model, data, "val")
            test_acc, _ = TR.evaluate(model, data, "test")
            rows.append((variant, int(seed), val_acc, test_acc))
            print(f"{variant} seed={seed}: val={val_acc:.4f} test={test_acc:.4f}")
    table_path = os.path.join(out_dir, "ablation.csv")
    with open(table_path, "w", encoding="utf-8") as fh:
        fh.write("variant,seed,val_acc,test_acc\n")
        for variant, seed, val_acc, test_acc in rows:
            fh.write(f"{variant},{seed},{val_acc:.10g},{test_acc:.10g}\n")
        for variant in M.ABLATIONS:
            vals = [r[2] for r in rows if r[0] == variant]
            tests = [r[3] for r in rows if r[0] == variant]
            fh.write(
                f"{variant},median,{statistics.median(vals):.10g},"
                f"{statistics.median(tests):.10g}\n"
            )
    print(f"wrote {table_path}")
    return EXIT_OK


def cmd_grad_check(cfg: dict, out_dir=None) -> int:
    results = GC.full_report(seed=cfg["seed"])
    failed = [r for r in results if not r.passed]
    width = max(len(r.name) for r in results)
    for r in results:
        status = "ok  " if r.passed else "FAIL"
        print(f"{status} {r.name:<{width}s} max_rel_err={r.max_rel_err:.3e} tol={r.tolerance:g}")
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        payload = [
            {"op": r.name, "max_rel_err": r.max_rel_err, "tolerance": r.tolerance,
             "passed": r.passed}
            for r in results
        ]
        with open(os.path.join(out_dir, "grad_check.json"), "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    if failed:
        print(f"{len(failed)} gradient check(s) failed")
        return EXIT_NUMERIC
    print(f"all {len(results)} gradient checks passed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ramen",
        description="Recurrent aggregation VQA pipeline on a synthetic compositional benchmark",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, needs_ckpt in (
        ("gen-data", False),
        ("train", False),
        ("eval", True),
        ("ablate", False),
        ("grad-check", False),
    ):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="run-config JSON path")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="override the output directory")
        p.add_argument("--ablation", default=None, help="override model ablation")
        p.add_argument("--split-regime", dest="split_regime", default=None,
                       help="override split regime")
        if needs_ckpt:
            p.add_argument("--checkpoint", required=True, help="checkpoint file to evaluate")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads = os.environ.get("RAMEN_THREADS")
    limiter = None
    if threads:
        try:
            from threadpoolctl import threadpool_limits

            limiter = threadpool_limits(limits=int(threads))
        except ImportError:
            pass
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        if args.out is not None:
            if args.command == "gen-data":
                cfg["dataset_dir"] = args.out
            else:
                cfg["out_dir"] = args.out
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint)
        if args.command == "ablate":
            return cmd_ablate(cfg)
        if args.command == "grad-check":
            return cmd_grad_check(cfg, out_dir=args.out)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        if limiter is not None:
            limiter.unregister()


if __name__ == "__main__":
    sys.exit(main())
