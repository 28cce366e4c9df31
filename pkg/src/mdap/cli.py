"""Command line front end.

Commands share one output directory with a fixed layout:

  out/
    manifest.json        dataset provenance (written by prepare)
    config_<cmd>.json    resolved options + hash of each command run
    splits/              <domain>_<split>.tsv pair files
    checkpoints/         model checkpoints
    logs/                per-epoch training logs (JSON lines)
    reports/             metrics, ablation and grid summaries
    grid/                one subdirectory per grid run

Options resolve in order: built-in defaults, then a key=value config
file (--config), then --preset, then explicit flags. Exit codes: 0 on
success, 2 for usage/config/data problems, 3 when training diverges.
"""

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from .data import (InteractionDataset, SyntheticSpec, build_dataset, k_core_filter,
                   load_domain, synthetic_records, write_domain_file)
from .errors import DataError, MdapError, ParameterError, TrainingDivergedError
from .evaluation import evaluate
from .model import ModelConfig, save_checkpoint
from .numerics import Rng
from .training import TrainConfig, run_ablation, train
from . import __version__

# name -> (python type, default). "lambda" maps to the lam field.
OPTION_TABLE = {
    "seed": (int, 0),
    "k": (int, 8),
    "tau": (float, 0.2),
    "lambda": (float, 0.5),
    "dropout": (float, 0.5),
    "epochs": (int, 1000),
    "patience": (int, 20),
    "batch_users": (int, 4096),
    "lr": (float, 1e-3),
    "embed_dim": (int, 64),
    "hidden": (int, 256),
    "ablation": (str, "full"),
    "min_interactions": (int, 1),
    "threshold": (float, 1.0),
    "cutoff": (int, 20),
    "n_users": (int, 200),
    "n_items_s": (int, 40),
    "n_items_t": (int, 30),
    "k_true": (int, 4),
    "overlap": (float, 0.5),
    "noise": (float, 0.05),
    "dropout_grid": (str, "0.5,0.7,0.9"),
    "tau_grid": (str, "0.1,0.2,0.5"),
    "k_grid": (str, "4,8,16"),
    "lambda_grid": (str, "0.1,0.5,1.0"),
}

PRESETS = {
    "epinions": {"dropout": 0.5, "tau": 0.2, "k": 8, "lambda": 0.5},
    "douban": {"dropout": 0.7, "tau": 0.1, "k": 16, "lambda": 0.1},
    "amazon": {"dropout": 0.7, "tau": 0.1, "k": 4, "lambda": 0.1},
}

SPLIT_FILES = [(d, sp) for d in ("s", "t") for sp in ("train", "valid", "test")]


def parse_config_file(path: str) -> dict[str, str]:
    """Read a flat key=value options file. '#' starts a comment."""
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParameterError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            key = key.strip().replace("-", "_")
            if key not in OPTION_TABLE:
                raise ParameterError(f"{path}:{lineno}: unknown option {key!r}")
            values[key] = value.strip()
    return values


def resolve_options(args: argparse.Namespace) -> dict:
    """Merge defaults, config file, preset and explicit flags."""
    resolved = {name: default for name, (_, default) in OPTION_TABLE.items()}
    config_path = getattr(args, "config", None)
    if config_path:
        for key, text in parse_config_file(config_path).items():
            typ = OPTION_TABLE[key][0]
            try:
                resolved[key] = typ(text)
            except ValueError as exc:
                raise ParameterError(f"bad value for {key!r}: {text!r}") from exc
    preset = getattr(args, "preset", None)
    if preset:
        resolved.update(PRESETS[preset])
    for key in OPTION_TABLE:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            resolved[key] = flag_value
    return resolved


def parse_grid(text: str, typ) -> list:
    values = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            values.append(typ(part))
        except ValueError as exc:
            raise ParameterError(f"bad grid value {part!r}") from exc
    if not values:
        raise ParameterError(f"empty grid spec {text!r}")
    return values


def config_hash(payload: dict) -> str:
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()[:16]


def write_json(path: str, payload: dict):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def run_payload(command: str, options: dict, extra: dict | None = None) -> dict:
    payload = {"command": command, "options": options}
    if extra:
        payload.update(extra)
    payload["config_hash"] = config_hash({"command": command, "options": options})
    return payload


def model_config_from(options: dict, ablation: str | None = None) -> ModelConfig:
    dropout = options["dropout"]
    if not 0.0 <= dropout < 1.0:
        raise ParameterError(f"dropout must be in [0, 1), got {dropout}")
    return ModelConfig(
        k=options["k"], embed_dim=options["embed_dim"], hidden=options["hidden"],
        tau=options["tau"], keep_prob=1.0 - dropout, lam=options["lambda"],
        ablation=ablation if ablation is not None else options["ablation"])


def train_config_from(options: dict, model: ModelConfig | None = None) -> TrainConfig:
    return TrainConfig(
        model=model if model is not None else model_config_from(options),
        epochs_max=options["epochs"], patience=options["patience"],
        batch_users=options["batch_users"], lr=options["lr"],
        eval_k=options["cutoff"], seed=options["seed"])


def split_file_path(out: str, domain: str, split: str) -> str:
    return os.path.join(out, "splits", f"{domain}_{split}.tsv")


def write_prepared(out: str, dataset: InteractionDataset, payload: dict):
    os.makedirs(os.path.join(out, "splits"), exist_ok=True)
    for domain, split in SPLIT_FILES:
        users = dataset.users
        items = dataset.items[domain]
        with open(split_file_path(out, domain, split), "w", encoding="utf-8") as fh:
            for u, i in dataset.pairs[(domain, split)]:
                fh.write(f"{users[int(u)]}\t{items[int(i)]}\n")
    manifest = {
        "seed": dataset.seed,
        "threshold": dataset.threshold,
        "k_core": dataset.k_core,
        "n_users": dataset.n_users,
        "n_items_s": dataset.n_items("s"),
        "n_items_t": dataset.n_items("t"),
        "splits": {d: {sp: dataset.split_size(d, sp) for sp in ("train", "valid", "test")}
                   for d in ("s", "t")},
        "config_hash": payload["config_hash"],
    }
    write_json(os.path.join(out, "manifest.json"), manifest)
    write_json(os.path.join(out, "config_prepare.json"), payload)


def load_prepared(out: str) -> InteractionDataset:
    """Rebuild the dataset from manifest.json and the split files."""
    manifest_path = os.path.join(out, "manifest.json")
    if not os.path.exists(manifest_path):
        raise DataError(f"{out} has no manifest.json; run prepare first")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    raw: dict[tuple[str, str], list[tuple[str, str]]] = {}
    for domain, split in SPLIT_FILES:
        path = split_file_path(out, domain, split)
        if not os.path.exists(path):
            raise DataError(f"missing split file {path}")
        pairs = []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                user_id, item_id = line.split("\t")
                pairs.append((user_id, item_id))
        raw[(domain, split)] = pairs
    users = sorted({u for pairs in raw.values() for u, _ in pairs})
    user_index = {u: idx for idx, u in enumerate(users)}
    dataset_pairs = {}
    items = {}
    for domain in ("s", "t"):
        ids = sorted({i for sp in ("train", "valid", "test")
                      for _, i in raw[(domain, sp)]})
        items[domain] = ids
        item_index = {i: idx for idx, i in enumerate(ids)}
        for split in ("train", "valid", "test"):
            dataset_pairs[(domain, split)] = np.asarray(
                [[user_index[u], item_index[i]] for u, i in raw[(domain, split)]],
                dtype=np.int64).reshape(-1, 2)
    dataset = InteractionDataset(
        users, items["s"], items["t"], dataset_pairs,
        threshold=manifest["threshold"], seed=manifest["seed"],
        k_core=manifest["k_core"])
    for domain in ("s", "t"):
        for split in ("train", "valid", "test"):
            if dataset.split_size(domain, split) != manifest["splits"][domain][split]:
                raise DataError(f"split {domain}/{split} does not match the manifest")
    return dataset


def cmd_synth(args: argparse.Namespace) -> int:
    options = resolve_options(args)
    spec = SyntheticSpec(
        n_users=options["n_users"], n_items_s=options["n_items_s"],
        n_items_t=options["n_items_t"], k_true=options["k_true"],
        overlap=options["overlap"], noise=options["noise"])
    records_s, records_t, planted = synthetic_records(spec, Rng(options["seed"]).derive(0))
    payload = run_payload("synth", options)
    os.makedirs(args.out, exist_ok=True)
    write_domain_file(os.path.join(args.out, "domain_s.tsv"), records_s)
    write_domain_file(os.path.join(args.out, "domain_t.tsv"), records_t)
    with open(os.path.join(args.out, "planted_views.tsv"), "w", encoding="utf-8") as fh:
        for uid in sorted(planted):
            fh.write(f"{uid}\t{planted[uid]}\n")
    write_json(os.path.join(args.out, "config_synth.json"), payload)
    print(f"wrote {len(records_s)} + {len(records_t)} interactions to {args.out}")
    return 0


def cmd_prepare(args: argparse.Namespace) -> int:
    options = resolve_options(args)
    records_s = load_domain(args.domain_s, strict=args.strict)
    records_t = load_domain(args.domain_t, strict=args.strict)
    records_s = k_core_filter(records_s, options["min_interactions"])
    records_t = k_core_filter(records_t, options["min_interactions"])
    dataset = build_dataset(records_s, records_t, Rng(options["seed"]),
                            threshold=options["threshold"],
                            k_core=options["min_interactions"])
    payload = run_payload("prepare", options,
                          {"domain_s": args.domain_s, "domain_t": args.domain_t})
    write_prepared(args.out, dataset, payload)
    print(f"prepared {dataset.n_users} users, "
          f"{dataset.n_items('s')}+{dataset.n_items('t')} items into {args.out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    options = resolve_options(args)
    config = train_config_from(options)
    dataset = load_prepared(args.out)
    params, log = train(dataset, config, verbose=not args.quiet)
    payload = run_payload("train", options)
    ckpt_rel = os.path.join("checkpoints", "model.ckpt")
    report = evaluate(params, config.model, dataset, "test", k=config.eval_k,
                      seed=config.seed, checkpoint=ckpt_rel)
    for sub in ("checkpoints", "logs", "reports"):
        os.makedirs(os.path.join(args.out, sub), exist_ok=True)
    save_checkpoint(os.path.join(args.out, ckpt_rel), params, config.model,
                    extra={"config_hash": payload["config_hash"],
                           "best_epoch": log.best_epoch, "seed": config.seed})
    log.write(os.path.join(args.out, "logs", "train_log.jsonl"))
    write_json(os.path.join(args.out, "reports", "test_metrics.json"),
               {**report.to_dict(), "config_hash": payload["config_hash"]})
    write_json(os.path.join(args.out, "config_train.json"), payload)
    print(f"best epoch {log.best_epoch}; test recall@{config.eval_k} "
          f"s={report.domains['s']['recall']:.4f} t={report.domains['t']['recall']:.4f}")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    options = resolve_options(args)
    config = train_config_from(options)
    dataset = load_prepared(args.out)
    report, artifacts = run_ablation(dataset, config, verbose=not args.quiet)
    payload = run_payload("ablate", options)
    for sub in ("checkpoints", "logs", "reports"):
        os.makedirs(os.path.join(args.out, sub), exist_ok=True)
    for row in report.rows:
        name = row["variant"]
        params, log = artifacts[name]
        tag = name.lower().replace("-", "_")
        log.write(os.path.join(args.out, "logs", f"ablation_{tag}.jsonl"))
        save_checkpoint(os.path.join(args.out, "checkpoints", f"ablation_{tag}.ckpt"),
                        params, model_config_from(options, ablation=row["ablation"]),
                        extra={"config_hash": payload["config_hash"], "seed": config.seed})
    write_json(os.path.join(args.out, "reports", "ablation.json"),
               {**report.to_dict(), "config_hash": payload["config_hash"]})
    with open(os.path.join(args.out, "reports", "ablation.txt"), "w", encoding="utf-8") as fh:
        fh.write(report.format_table() + "\n")
    if not args.quiet:
        print(report.format_table())
    return 0


def grid_run_once(dataset, options: dict, combo: dict, out: str, run_id: int,
                  cache: dict, quiet: bool) -> dict:
    key = (combo["dropout"], combo["tau"], combo["k"], combo["lambda"])
    if key in cache:
        return cache[key]
    merged = dict(options)
    merged.update(combo)
    config = train_config_from(merged)
    run_dir = os.path.join(out, "grid", f"run_{run_id:03d}_d{combo['dropout']:g}"
                           f"_t{combo['tau']:g}_k{combo['k']}_l{combo['lambda']:g}")
    params, log = train(dataset, config, verbose=False)
    best = max(0.5 * (r["val_ndcg20_s"] + r["val_ndcg20_t"]) for r in log.records)
    result = {
        "run_id": run_id,
        "dropout": combo["dropout"], "tau": combo["tau"],
        "k": combo["k"], "lambda": combo["lambda"],
        "seed": config.seed, "best_epoch": log.best_epoch,
        "val_ndcg_mean": best,
    }
    os.makedirs(run_dir, exist_ok=True)
    log.write(os.path.join(run_dir, "train_log.jsonl"))
    write_json(os.path.join(run_dir, "result.json"), result)
    if not quiet:
        print(f"grid run {run_id:3d}: dropout={combo['dropout']:g} tau={combo['tau']:g} "
              f"k={combo['k']} lambda={combo['lambda']:g} -> val ndcg {best:.4f}")
    cache[key] = result
    return result


def cmd_grid(args: argparse.Namespace) -> int:
    options = resolve_options(args)
    dropouts = parse_grid(options["dropout_grid"], float)
    taus = parse_grid(options["tau_grid"], float)
    ks = parse_grid(options["k_grid"], int)
    lams = parse_grid(options["lambda_grid"], float)
    train_config_from(options)  # validate the shared options up front
    dataset = load_prepared(args.out)
    payload = run_payload("grid", options, {"full_grid": bool(args.full_grid)})

    cache: dict[tuple, dict] = {}
    runs: list[dict] = []
    run_id = 0

    def launch(combo: dict) -> dict:
        nonlocal run_id
        key = (combo["dropout"], combo["tau"], combo["k"], combo["lambda"])
        fresh = key not in cache
        result = grid_run_once(dataset, options, combo, args.out, run_id, cache, args.quiet)
        if fresh:
            runs.append(result)
            run_id += 1
        return result

    if args.full_grid:
        for dropout in dropouts:
            for tau in taus:
                for k in ks:
                    for lam in lams:
                        launch({"dropout": dropout, "tau": tau, "k": k, "lambda": lam})
        best = max(runs, key=lambda r: (r["val_ndcg_mean"], -r["run_id"]))
        stages = [{"name": "full", "runs": [r["run_id"] for r in runs]}]
    else:
        # Stage 1 crosses dropout and tau at the base k/lambda, stage 2
        # sweeps k at the stage-1 best, stage 3 sweeps lambda on top.
        stage1 = [launch({"dropout": d, "tau": t, "k": options["k"],
                          "lambda": options["lambda"]})
                  for d in dropouts for t in taus]
        best = max(stage1, key=lambda r: (r["val_ndcg_mean"], -r["run_id"]))
        stage2 = [launch({"dropout": best["dropout"], "tau": best["tau"], "k": k,
                          "lambda": options["lambda"]}) for k in ks]
        best = max(stage2 + [best], key=lambda r: (r["val_ndcg_mean"], -r["run_id"]))
        stage3 = [launch({"dropout": best["dropout"], "tau": best["tau"],
                          "k": best["k"], "lambda": lam}) for lam in lams]
        best = max(stage3 + [best], key=lambda r: (r["val_ndcg_mean"], -r["run_id"]))
        stages = [
            {"name": "dropout_tau", "runs": sorted({r["run_id"] for r in stage1})},
            {"name": "k", "runs": sorted({r["run_id"] for r in stage2})},
            {"name": "lambda", "runs": sorted({r["run_id"] for r in stage3})},
        ]

    os.makedirs(os.path.join(args.out, "reports"), exist_ok=True)
    summary = {
        "metric": "mean validation ndcg at cutoff over both domains",
        "stages": stages,
        "runs": runs,
        "best": best,
        "config_hash": payload["config_hash"],
    }
    write_json(os.path.join(args.out, "reports", "grid.json"), summary)
    header = (f"{'run':>4} {'dropout':>8} {'tau':>6} {'k':>4} {'lambda':>7} "
              f"{'seed':>6} {'val_ndcg':>9}")
    lines = [header, "-" * len(header)]
    for r in runs:
        lines.append(f"{r['run_id']:>4} {r['dropout']:>8g} {r['tau']:>6g} {r['k']:>4} "
                     f"{r['lambda']:>7g} {r['seed']:>6} {r['val_ndcg_mean']:>9.4f}")
    lines.append(f"best: run {best['run_id']} (dropout={best['dropout']:g}, "
                 f"tau={best['tau']:g}, k={best['k']}, lambda={best['lambda']:g})")
    with open(os.path.join(args.out, "reports", "grid.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    write_json(os.path.join(args.out, "config_grid.json"), payload)
    if not args.quiet:
        print("\n".join(lines))
    return 0


def add_shared_options(parser: argparse.ArgumentParser, names: list[str]):
    flag_help = {
        "seed": "random seed for every stochastic stage",
        "k": "number of preference views",
        "tau": "assignment softmax temperature",
        "lambda": "gate orthogonality weight",
        "dropout": "input dropout probability (keep prob is 1 - dropout)",
        "epochs": "maximum training epochs",
        "patience": "early stopping patience in epochs",
        "batch_users": "user rows per training batch",
        "lr": "Adam learning rate",
        "embed_dim": "embedding width",
        "hidden": "encoder/decoder hidden width",
        "ablation": "model variant to train",
        "min_interactions": "per-domain core filter level (1 disables)",
        "threshold": "minimum rating that counts as an interaction",
        "cutoff": "ranking cutoff for recall/ndcg",
        "n_users": "synthetic user count",
        "n_items_s": "synthetic item count, domain s",
        "n_items_t": "synthetic item count, domain t",
        "k_true": "number of planted views",
        "overlap": "fraction of users present in both domains",
        "noise": "off-block interaction probability",
        "dropout_grid": "comma list of dropout values",
        "tau_grid": "comma list of tau values",
        "k_grid": "comma list of k values",
        "lambda_grid": "comma list of lambda values",
    }
    for name in names:
        typ, default = OPTION_TABLE[name]
        kwargs = {"type": typ, "default": None, "dest": name,
                  "help": f"{flag_help[name]} (default {default})"}
        if name == "ablation":
            kwargs["choices"] = ("full", "no_gumbel", "single_view", "no_gate")
            del kwargs["type"]
        parser.add_argument("--" + name.replace("_", "-"), **kwargs)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mdap",
        description="Cross-domain recommender with multi-view preference encoding")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    train_opts = ["seed", "k", "tau", "lambda", "dropout", "epochs", "patience",
                  "batch_users", "lr", "embed_dim", "hidden", "ablation", "cutoff"]

    p = sub.add_parser("synth", help="generate a planted-structure synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="key=value options file")
    add_shared_options(p, ["seed", "n_users", "n_items_s", "n_items_t", "k_true",
                           "overlap", "noise"])
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="ingest two domain files and write splits")
    p.add_argument("--domain-s", required=True, help="domain s interaction file")
    p.add_argument("--domain-t", required=True, help="domain t interaction file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="key=value options file")
    p.add_argument("--lenient", dest="strict", action="store_false",
                   help="skip malformed lines with a warning instead of failing")
    add_shared_options(p, ["seed", "min_interactions", "threshold"])
    p.set_defaults(func=cmd_prepare, strict=True)

    p = sub.add_parser("train", help="train on a prepared dataset")
    p.add_argument("--out", required=True, help="prepared dataset / output directory")
    p.add_argument("--config", help="key=value options file")
    p.add_argument("--preset", choices=sorted(PRESETS),
                   help="named hyperparameter preset")
    p.add_argument("--quiet", action="store_true", help="suppress per-epoch progress")
    add_shared_options(p, train_opts)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="train all four model variants and compare")
    p.add_argument("--out", required=True, help="prepared dataset / output directory")
    p.add_argument("--config", help="key=value options file")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--quiet", action="store_true")
    add_shared_options(p, [n for n in train_opts if n != "ablation"])
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("grid", help="staged hyperparameter search")
    p.add_argument("--out", required=True, help="prepared dataset / output directory")
    p.add_argument("--config", help="key=value options file")
    p.add_argument("--full-grid", action="store_true",
                   help="run the full cross product instead of the staged search")
    p.add_argument("--quiet", action="store_true")
    add_shared_options(p, [n for n in train_opts if n != "ablation"]
                       + ["dropout_grid", "tau_grid", "k_grid", "lambda_grid"])
    p.set_defaults(func=cmd_grid)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (MdapError, OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
