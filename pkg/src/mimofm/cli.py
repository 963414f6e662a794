"""Config-driven pipeline CLI.

Stages: gen-data, pretrain, train, adapt, eval, sweep, flops. One YAML config
document drives every stage; ``--seed`` and repeated ``--set section.key=value``
flags override it. Every stage writes a manifest recording the resolved
config, its digest, input/output artifact hashes and headline metrics, so
reruns are auditable and byte-identical for a fixed config and seed.

Exit codes: 0 success, 2 configuration problem, 3 missing/invalid
prerequisite artifact, 4 numerical failure.
"""

import argparse
import hashlib
import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import yaml

from .adaptation import DEFAULT_HEAD, deploy
from .baselines import wmmse_rate_bound
from .channelgen import EnvironmentSpec, generate_dataset, read_dataset, write_dataset
from .core import SystemConfig
from .errors import (
    BisectionError,
    ConfigError,
    DatasetFormatError,
    MimofmError,
    NumericalFailureError,
    PrerequisiteError,
)
from .evalbench import (
    config_digest,
    flop_count,
    max_sum_rate_eval,
    model_flop_audit,
    report_path,
    round_sig,
    tradeoff_sweep,
    write_json_report,
    write_tradeoff_csv,
)
from .nn import ModelHyper, load_checkpoint, save_checkpoint
from .training import (
    TrainConfig,
    init_train_state,
    multiobjective_epoch,
    pretrain_epoch,
)

EXIT_CONFIG = 2
EXIT_PREREQ = 3
EXIT_NUMERIC = 4

_ENV_KEYS = {
    "env_id",
    "mean_azimuth",
    "mean_elevation",
    "los",
    "rician_k",
    "n_clusters",
    "angle_spread",
    "gain_db_spread",
    "seed",
    "n_samples",
}

_SECTIONS = {
    "system": {"n_tx", "n_users", "p_tx", "p_rf", "noise_power"},
    "envs": None,
    "deploy_env": None,
    "model": {"embed_dim", "ffn_dim", "n_heads", "n_layers", "dropout"},
    "train": {
        "mu",
        "clamp_threshold",
        "learning_rate",
        "batch_size",
        "pretrain_epochs",
        "epochs",
        "default_head_epochs",
        "anchor_fraction",
        "seed",
    },
    "adapt": {"mode", "n_select", "n_local_csi", "seed", "adapt_epochs"},
    "eval": {
        "n_eval",
        "n_points",
        "seed",
        "rate_bound_evals",
        "wmmse_max_iter",
        "wmmse_tol",
    },
    "paths": {"data_dir", "checkpoint_dir", "report_dir"},
}

_DEFAULTS = {
    "adapt": {
        "mode": "zero_shot",
        "n_select": 5,
        "n_local_csi": 10,
        "seed": 0,
        "adapt_epochs": None,
    },
    "eval": {
        "n_eval": 100,
        "n_points": 11,
        "seed": 0,
        "rate_bound_evals": 50,
        "wmmse_max_iter": 200,
        "wmmse_tol": 1e-4,
    },
    "paths": {"data_dir": "data", "checkpoint_dir": "ckpt", "report_dir": "reports"},
}


def _check_keys(mapping, allowed, where):
    unknown = set(mapping) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")


def load_config(path, overrides=(), seed=None):
    """Parse, validate and resolve a config document."""
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file is not valid YAML: {exc}")
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")

    # defaults merge first so --set can target keys the file omits
    for section, defaults in _DEFAULTS.items():
        merged = dict(defaults)
        merged.update(raw.get(section) or {})
        raw[section] = merged
    for section in ("system", "model", "train"):
        raw.setdefault(section, {})
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        key_path, _, value = item.partition("=")
        keys = key_path.split(".")
        if len(keys) < 2:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        node = raw
        for k in keys[:-1]:
            if not isinstance(node, dict) or k not in node:
                raise ConfigError(f"--set path {key_path!r} not found in config")
            node = node[k]
        if not isinstance(node, dict):
            raise ConfigError(f"--set path {key_path!r} not found in config")
        parsed = yaml.safe_load(value)
        if isinstance(parsed, str):
            # YAML 1.1 leaves exponent forms like 5e-4 as strings
            try:
                parsed = float(parsed)
            except ValueError:
                pass
        node[keys[-1]] = parsed
    if seed is not None:
        raw.setdefault("train", {})["seed"] = seed
        raw["eval"]["seed"] = seed
        raw["adapt"]["seed"] = seed

    _check_keys(raw, set(_SECTIONS), "config root")
    for section, allowed in _SECTIONS.items():
        if section in raw and allowed is not None:
            if not isinstance(raw[section], dict):
                raise ConfigError(f"section {section!r} must be a mapping")
            _check_keys(raw[section], allowed, f"section {section!r}")

    try:
        system = SystemConfig(**raw.get("system", {}))
        hyper = ModelHyper(
            n_tx=system.n_tx, n_users=system.n_users, **raw.get("model", {})
        )
        train = TrainConfig(**raw.get("train", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}")

    envs = []
    for entry in raw.get("envs", []):
        envs.append(_parse_env(entry, system))
    deploy_env = None
    if raw.get("deploy_env") is not None:
        deploy_env = _parse_env(raw["deploy_env"], system)

    resolved = {
        "system": raw.get("system", {}),
        "model": raw.get("model", {}),
        "train": raw["train"],
        "adapt": raw["adapt"],
        "eval": raw["eval"],
        "paths": raw["paths"],
        "envs": raw.get("envs", []),
        "deploy_env": raw.get("deploy_env"),
    }
    return {
        "system": system,
        "hyper": hyper,
        "train": train,
        "adapt": raw["adapt"],
        "eval": raw["eval"],
        "paths": raw["paths"],
        "envs": envs,
        "deploy_env": deploy_env,
        "resolved": resolved,
        "digest": config_digest(resolved),
    }


def _parse_env(entry, system):
    if not isinstance(entry, dict):
        raise ConfigError("environment entries must be mappings")
    _check_keys(entry, _ENV_KEYS, f"environment {entry.get('env_id', '?')!r}")
    if "env_id" not in entry:
        raise ConfigError("environment entry is missing env_id")
    fields = {k: v for k, v in entry.items() if k != "n_samples"}
    try:
        spec = EnvironmentSpec(n_tx=system.n_tx, **fields)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid environment {entry['env_id']!r}: {exc}")
    n_samples = int(entry.get("n_samples", 5000))
    if n_samples < 0:
        raise ConfigError("n_samples must be >= 0")
    return spec, n_samples


def _git_revision():
    try:
        out = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=10,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _write_manifest(directory, stage, cfg, inputs, outputs, summary):
    manifest = {
        "stage": stage,
        "config": cfg["resolved"],
        "config_digest": cfg["digest"],
        "git": _git_revision(),
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {str(p): _sha256(p) for p in outputs},
        "summary": summary,
    }
    path = Path(directory) / f"{stage}.manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return path


def _report_dir(cfg):
    return os.environ.get("MIMOFM_REPORT_DIR", cfg["paths"]["report_dir"])


def _dataset_path(cfg, env_id):
    return Path(cfg["paths"]["data_dir"]) / f"{env_id}.csif"


def _load_env_datasets(cfg, include_deploy=False):
    datasets = {}
    specs = list(cfg["envs"])
    if include_deploy and cfg["deploy_env"] is not None:
        specs.append(cfg["deploy_env"])
    for spec, _ in specs:
        path = _dataset_path(cfg, spec.env_id)
        if not path.exists():
            raise PrerequisiteError(
                f"dataset {path} not found; run gen-data first"
            )
        ds = read_dataset(path)
        if ds.n_tx != cfg["system"].n_tx:
            raise PrerequisiteError(
                f"dataset {path} has n_tx={ds.n_tx}, config says {cfg['system'].n_tx}"
            )
        datasets[spec.env_id] = ds
    return datasets


def _load_checkpoint_for(cfg, name):
    path = Path(cfg["paths"]["checkpoint_dir"]) / name
    if not path.exists():
        raise PrerequisiteError(f"checkpoint {path} not found")
    return path, load_checkpoint(path)


def _rate_bounds_path(cfg):
    return Path(cfg["paths"]["checkpoint_dir"]) / "rate_bounds.json"


def _load_rate_bounds(cfg):
    path = _rate_bounds_path(cfg)
    if not path.exists():
        raise PrerequisiteError(f"{path} not found; run pretrain first")
    with open(path) as fh:
        return json.load(fh)


def _write_jsonl(path, rows):
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True))
            fh.write("\n")


# -- stages ---------------------------------------------------------------


def stage_gen_data(cfg, args):
    data_dir = Path(cfg["paths"]["data_dir"])
    data_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    summary = {}
    specs = list(cfg["envs"])
    if cfg["deploy_env"] is not None:
        specs.append(cfg["deploy_env"])
    if not specs:
        raise ConfigError("no environments configured")
    for spec, n_samples in specs:
        dataset = generate_dataset(spec, n_samples)
        path = _dataset_path(cfg, spec.env_id)
        write_dataset(dataset, path)
        outputs.append(path)
        summary[spec.env_id] = {"n_samples": n_samples, "los": spec.los}
        print(f"wrote {path} ({n_samples} samples)")
    _write_manifest(data_dir, "gen-data", cfg, [], outputs, summary)
    return 0


def stage_pretrain(cfg, args):
    ckpt_dir = Path(cfg["paths"]["checkpoint_dir"])
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    datasets = _load_env_datasets(cfg)
    env_ids = [spec.env_id for spec, _ in cfg["envs"]]
    if not env_ids:
        raise ConfigError("no training environments configured")
    system, train = cfg["system"], cfg["train"]

    bounds = {}
    for env_id in env_ids:
        bounds[env_id] = wmmse_rate_bound(
            datasets[env_id],
            system,
            n_eval=cfg["eval"]["rate_bound_evals"],
            seed=train.seed,
            max_iter=cfg["eval"]["wmmse_max_iter"],
            tol=cfg["eval"]["wmmse_tol"],
        )
        print(f"rate bound {env_id}: {bounds[env_id]:.3f} b/s/Hz")
    with open(_rate_bounds_path(cfg), "w") as fh:
        json.dump(bounds, fh, sort_keys=True, indent=2)

    state = init_train_state(
        cfg["hyper"],
        env_ids,
        [bounds[e] for e in env_ids],
        train,
        init_seed=train.seed,
    )
    dataset_list = [datasets[e] for e in env_ids]
    for epoch in range(train.pretrain_epochs):
        metrics = pretrain_epoch(state, dataset_list, system, train)
        mean_rates = metrics[-1]["mean_rates"]
        print(
            f"phase1 epoch {epoch}: loss {metrics[-1]['loss']:.4f} "
            f"rates {np.array2string(np.array(mean_rates), precision=2)}"
        )
    ckpt = ckpt_dir / "pretrained.mmfm"
    save_checkpoint(ckpt, state.params, state.heads)
    log = ckpt_dir / "pretrain_log.jsonl"
    _write_jsonl(log, state.history)
    inputs = [_dataset_path(cfg, e) for e in env_ids]
    _write_manifest(
        ckpt_dir,
        "pretrain",
        cfg,
        inputs,
        [ckpt, log, _rate_bounds_path(cfg)],
        {"rate_bounds": bounds, "epochs": train.pretrain_epochs},
    )
    return 0


def stage_train(cfg, args):
    ckpt_dir = Path(cfg["paths"]["checkpoint_dir"])
    datasets = _load_env_datasets(cfg)
    env_ids = [spec.env_id for spec, _ in cfg["envs"]]
    system, train = cfg["system"], cfg["train"]
    pre_path, (hyper, params, heads) = _load_checkpoint_for(cfg, "pretrained.mmfm")
    bounds = _load_rate_bounds(cfg)
    missing = [e for e in env_ids if e not in heads]
    if missing:
        raise PrerequisiteError(f"checkpoint lacks heads for {missing}")

    state = init_train_state(
        hyper,
        env_ids,
        [bounds[e] for e in env_ids],
        train,
        init_seed=train.seed,
        params=params,
        heads=heads,
    )
    dataset_list = [datasets[e] for e in env_ids]
    for epoch in range(train.epochs):
        metrics = multiobjective_epoch(state, dataset_list, system, train)
        print(f"phase2 epoch {epoch}: loss {metrics[-1]['loss']:.5f}")

    from .training import train_head

    default_head = state.heads[env_ids[0]].copy()
    head_epochs = train.default_head_epochs
    if head_epochs is None:
        head_epochs = train.epochs
    train_head(
        state.params,
        default_head,
        dataset_list,
        [bounds[e] for e in env_ids],
        system,
        train,
        epochs=head_epochs,
        seed_tag=0,
    )
    state.heads[DEFAULT_HEAD] = default_head

    ckpt = ckpt_dir / "trained.mmfm"
    save_checkpoint(ckpt, state.params, state.heads)
    log = ckpt_dir / "train_log.jsonl"
    _write_jsonl(log, state.history)
    inputs = [pre_path] + [_dataset_path(cfg, e) for e in env_ids]
    _write_manifest(
        ckpt_dir,
        "train",
        cfg,
        inputs,
        [ckpt, log],
        {"epochs": train.epochs, "default_head_epochs": head_epochs},
    )
    return 0


def stage_adapt(cfg, args):
    ckpt_dir = Path(cfg["paths"]["checkpoint_dir"])
    mode = args.mode or cfg["adapt"]["mode"]
    if cfg["deploy_env"] is None:
        raise ConfigError("adapt stage needs a deploy_env section")
    ckpt_path, (hyper, params, heads) = _load_checkpoint_for(cfg, "trained.mmfm")
    deploy_spec, _ = cfg["deploy_env"]
    local_path = _dataset_path(cfg, deploy_spec.env_id)
    if not local_path.exists():
        raise PrerequisiteError(f"deployment dataset {local_path} not found")
    local = read_dataset(local_path)

    train_datasets = None
    rmax_map = None
    if mode == "few_shot":
        train_datasets = _load_env_datasets(cfg)
        rmax_map = _load_rate_bounds(cfg)
    result = deploy(
        params,
        heads,
        mode,
        local,
        cfg["system"],
        cfg["train"],
        train_datasets=train_datasets,
        rmax_map=rmax_map,
        n_select=cfg["adapt"]["n_select"],
        n_local_csi=cfg["adapt"]["n_local_csi"],
        seed=cfg["adapt"]["seed"],
        adapt_epochs=cfg["adapt"]["adapt_epochs"],
    )
    heads = dict(heads)
    heads[deploy_spec.env_id] = result.head
    out_path = ckpt_dir / f"adapted_{mode}.mmfm"
    save_checkpoint(out_path, params, heads)

    report_dir = Path(_report_dir(cfg))
    report_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "mode": mode,
        "env_id": deploy_spec.env_id,
        "similarities": result.similarities,
        "selected": result.selected,
        "local_rmax": result.local_rmax,
    }
    rpt = report_path(
        report_dir, f"adapt_{mode}", cfg["digest"], cfg["adapt"]["seed"], "json"
    )
    write_json_report(rpt, payload)
    print(f"adapted head ({mode}) -> {out_path}")
    if result.selected:
        print(f"retrieved environments: {', '.join(result.selected)}")
    _write_manifest(
        ckpt_dir,
        f"adapt-{mode}",
        cfg,
        [ckpt_path, local_path],
        [out_path, Path(rpt)],
        payload,
    )
    return 0


def stage_eval(cfg, args):
    checkpoint = args.checkpoint or str(
        Path(cfg["paths"]["checkpoint_dir"]) / "trained.mmfm"
    )
    if not Path(checkpoint).exists():
        raise PrerequisiteError(f"checkpoint {checkpoint} not found")
    hyper, params, heads = load_checkpoint(checkpoint)
    datasets = _load_env_datasets(cfg, include_deploy=True)
    system = cfg["system"]
    seed = cfg["eval"]["seed"]
    report = {"checkpoint": str(checkpoint), "per_env": {}}
    for env_id, dataset in sorted(datasets.items()):
        head = heads.get(args.head or env_id, heads.get(DEFAULT_HEAD))
        if head is None:
            raise PrerequisiteError(
                f"no head for {env_id!r} and no default head in {checkpoint}"
            )
        row = max_sum_rate_eval(
            params,
            head,
            dataset,
            system,
            n_eval=cfg["eval"]["n_eval"],
            seed=seed,
            wmmse_max_iter=cfg["eval"]["wmmse_max_iter"],
            wmmse_tol=cfg["eval"]["wmmse_tol"],
        )
        report["per_env"][env_id] = row
        print(
            f"{env_id}: model {row['model']:.2f}  zf {row['zf']:.2f}  "
            f"wmmse {row['wmmse']:.2f} b/s/Hz"
        )
    report_dir = Path(_report_dir(cfg))
    report_dir.mkdir(parents=True, exist_ok=True)
    rpt = report_path(report_dir, "eval", cfg["digest"], seed, "json")
    write_json_report(rpt, report)
    _write_manifest(
        report_dir, "eval", cfg, [Path(checkpoint)], [Path(rpt)], report["per_env"]
    )
    return 0


def stage_sweep(cfg, args):
    checkpoint = args.checkpoint or str(
        Path(cfg["paths"]["checkpoint_dir"]) / "trained.mmfm"
    )
    if not Path(checkpoint).exists():
        raise PrerequisiteError(f"checkpoint {checkpoint} not found")
    hyper, params, heads = load_checkpoint(checkpoint)
    datasets = _load_env_datasets(cfg, include_deploy=True)
    system = cfg["system"]
    seed = cfg["eval"]["seed"]
    if cfg["deploy_env"] is not None:
        env_id = cfg["deploy_env"][0].env_id
    else:
        env_id = cfg["envs"][0][0].env_id
    head = heads.get(args.head or env_id, heads.get(DEFAULT_HEAD))
    if head is None:
        raise PrerequisiteError(f"no usable head in {checkpoint}")
    dataset = datasets[env_id]
    rmax = wmmse_rate_bound(
        dataset,
        system,
        n_eval=cfg["eval"]["rate_bound_evals"],
        seed=seed,
        max_iter=cfg["eval"]["wmmse_max_iter"],
        tol=cfg["eval"]["wmmse_tol"],
    )
    points = tradeoff_sweep(
        params,
        head,
        dataset,
        system,
        rmax,
        n_points=cfg["eval"]["n_points"],
        n_eval=cfg["eval"]["n_eval"],
        seed=seed,
    )
    report_dir = Path(_report_dir(cfg))
    report_dir.mkdir(parents=True, exist_ok=True)
    csv_path = report_path(report_dir, f"sweep_{env_id}", cfg["digest"], seed, "csv")
    write_tradeoff_csv(csv_path, points)
    for p in points:
        err = (
            "n/a"
            if p.mean_relative_rate_error is None
            else f"{p.mean_relative_rate_error:.3f}"
        )
        print(
            f"requested {p.requested_sum:7.2f}  achieved {p.achieved_sum:7.2f}  "
            f"energy {p.mean_energy:.4g}  rel_err {err}"
        )
    _write_manifest(
        report_dir,
        "sweep",
        cfg,
        [Path(checkpoint)],
        [Path(csv_path)],
        {"env_id": env_id, "rmax": rmax, "n_points": cfg["eval"]["n_points"]},
    )
    return 0


def stage_flops(cfg, args):
    system = cfg["system"] if cfg else SystemConfig()
    hyper = cfg["hyper"] if cfg else ModelHyper()
    counts = {
        name: flop_count(name, system.n_users, system.n_tx)
        for name in ("zf", "wmmse", "model")
    }
    for name, value in counts.items():
        print(
            f"{name:>6}: {value:14.1f} flop  "
            f"({round_sig(value / 1e6, 2):g} M, 2 s.f.)"
        )
    print(f" ratio: wmmse/model = {counts['wmmse'] / counts['model']:.2f}")
    audit = model_flop_audit(hyper)
    print(f" audit: this implementation's forward = {audit['total'] / 1e6:.3f} M flop")
    return 0


STAGES = {
    "gen-data": stage_gen_data,
    "pretrain": stage_pretrain,
    "train": stage_train,
    "adapt": stage_adapt,
    "eval": stage_eval,
    "sweep": stage_sweep,
    "flops": stage_flops,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mimofm", description="multi-user MIMO precoding pipeline"
    )
    sub = parser.add_subparsers(dest="stage", required=True)
    for stage in STAGES:
        p = sub.add_parser(stage)
        p.add_argument("--config", help="YAML config file", default=None)
        p.add_argument("--seed", type=int, default=None, help="override all seeds")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="SECTION.KEY=VALUE",
            help="override one config value",
        )
        if stage == "adapt":
            p.add_argument(
                "--mode", choices=["zero_shot", "few_shot", "full"], default=None
            )
        if stage in ("eval", "sweep"):
            p.add_argument("--checkpoint", default=None)
            p.add_argument("--head", default=None, help="head env_id to evaluate")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.config is None:
            if args.stage != "flops":
                raise ConfigError("--config is required for this stage")
            cfg = None
        else:
            cfg = load_config(args.config, overrides=args.overrides, seed=args.seed)
        return STAGES[args.stage](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PrerequisiteError, DatasetFormatError, FileNotFoundError) as exc:
        print(f"prerequisite error: {exc}", file=sys.stderr)
        return EXIT_PREREQ
    except (NumericalFailureError, BisectionError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except MimofmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
