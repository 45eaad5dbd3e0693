"""Command-line entry point: ``mald2gan <subcommand> [--config F] [--seed N] [--out D] [--key V]``.

Configuration is a plain ``key=value`` file, one per line, ``#`` starts a
comment. Flags override the file and defaults fill the rest. Every subcommand
writes ``config.txt`` (the resolved configuration) and a manifest next to its
artifacts.

Layout of the output directory::

    data/{full,train,test}.csv       synth-data, featurize
    selected/{full,train,test}.csv   select-features (+ features.txt)
    models/<KIND>.model              train-blackbox
    gans/<KIND>_<VARIANT>.gan        train-gan (+ _stats.csv)
    reports/attack_report.{csv,md}   evaluate
    reports/retrain_report.{csv,md}  retrain-defense
    reports/gradcheck.txt            gradcheck

Exit codes: 0 success, 1 validation failure, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__, container, data, detectors, experiments, gan, numnet, seeding
from .dataset import DatasetError

log = logging.getLogger("mald2gan")


class ConfigError(ValueError):
    pass


class MissingArtifact(ConfigError):
    def __init__(self, path, producer):
        super().__init__(f"missing {path}; run `mald2gan {producer}` first")


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    data: str = ""  # dataset directory; defaults to <out>/data
    # synthetic corpus
    n: int = 20_000
    malware_fraction: float = 0.7
    overlap: float = 0.3
    train_fraction: float = 0.8
    # GAN
    M: int = 160
    Z: int = 10
    alpha: float = 0.5
    batch_size: int = 128
    epochs: int = 20
    retrain_epochs: int = 5
    hidden: int = 256
    lr_generator: float = 1e-3
    lr_d1: float = 1e-3
    lr_d2: float = 1e-3
    leaky_slope: float = 0.2
    # experiments
    kinds: list = field(default_factory=lambda: list(detectors.KINDS))
    variants: list = field(default_factory=lambda: list(gan.VARIANTS))
    retrain_kinds: list = field(default_factory=lambda: list(experiments.RETRAIN_KINDS))
    retrain_variant: str = gan.MALD2GAN
    rounds: int = 5
    # featurize / select-features
    reports: str = ""
    vocab: str = ""
    k: int = 160
    # gradcheck
    gradcheck_seeds: int = 20

    def validate(self) -> "RunConfig":
        def need(ok, key, why):
            if not ok:
                raise ConfigError(f"{key}: {why}")

        need(self.seed >= 0, "seed", "must be non-negative")
        need(self.n >= 2, "n", "must be at least 2")
        need(0 < self.malware_fraction < 1, "malware_fraction", "must lie in (0, 1)")
        need(0 <= self.overlap <= 1, "overlap", "must lie in [0, 1]")
        need(0 < self.train_fraction < 1, "train_fraction", "must lie in (0, 1)")
        need(0 <= self.alpha <= 1, "alpha", "must lie in [0, 1]")
        need(0 < self.leaky_slope < 1, "leaky_slope", "must lie in (0, 1)")
        for key in ("M", "Z", "batch_size", "epochs", "hidden", "rounds", "k", "gradcheck_seeds"):
            need(getattr(self, key) > 0, key, "must be positive")
        need(self.retrain_epochs >= 0, "retrain_epochs", "must be non-negative")
        for key in ("lr_generator", "lr_d1", "lr_d2"):
            need(getattr(self, key) > 0, key, "must be positive")
        for key, allowed in (("kinds", detectors.KINDS), ("retrain_kinds", detectors.KINDS),
                             ("variants", gan.VARIANTS)):
            bad = [v for v in getattr(self, key) if v not in allowed]
            need(not bad and getattr(self, key), key, f"unknown or empty {bad}; choose from {allowed}")
        need(self.retrain_variant in gan.VARIANTS, "retrain_variant", f"choose from {gan.VARIANTS}")
        return self

    def gan_config(self, M: int | None = None) -> gan.GanConfig:
        keys = {f.name for f in fields(gan.GanConfig)}
        vals = {k: v for k, v in asdict(self).items() if k in keys}
        vals["M"] = M or self.M
        return gan.GanConfig(**vals)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={','.join(v) if isinstance(v, list) else v}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    default = getattr(RunConfig(), key)
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            return [s.strip() for s in raw.split(",") if s.strip()]
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None


def parse_config_text(text: str) -> dict:
    values = {}
    for line_no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{key}: unknown configuration key (line {line_no})")
        values[key] = _coerce(key, raw)
    return values


def parse_config(text: str = "", overrides: dict | None = None) -> RunConfig:
    """File text first, then flag overrides, defaults for the rest."""
    values = parse_config_text(text)
    for key, raw in (overrides or {}).items():
        if key not in _FIELDS:
            raise ConfigError(f"{key}: unknown configuration key")
        values[key] = _coerce(key, raw) if isinstance(raw, str) else raw
    return RunConfig(**values).validate()


# ---------------------------------------------------------------- artifacts

def _data_dir(cfg: RunConfig) -> Path:
    return Path(cfg.data) if cfg.data else Path(cfg.out) / "data"


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise MissingArtifact(path, producer)
    return path


def _load_split(cfg: RunConfig):
    d = _data_dir(cfg)
    train = data.load_csv(_require(d / "train.csv", "synth-data"))
    test = data.load_csv(_require(d / "test.csv", "synth-data"))
    return train, test


def _write_split(full, out_dir: Path, cfg: RunConfig):
    out_dir.mkdir(parents=True, exist_ok=True)
    train, test = data.split(full, cfg.train_fraction, seeding.derive_seed(cfg.seed, seeding.SPLIT))
    paths = []
    for name, part in (("full", full), ("train", train), ("test", test)):
        data.save_csv(part, out_dir / f"{name}.csv")
        paths.append(out_dir / f"{name}.csv")
    return paths


def _write_manifest(cfg: RunConfig, command: str, artifacts, extra=None):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    manifest = {
        "command": command,
        "seed": cfg.seed,
        "config_sha256": cfg.digest(),
        "config": asdict(cfg),
        "versions": {"mald2gan": __version__, "numpy": np.__version__,
                     "python": platform.python_version(),
                     "container_format": container.FORMAT_VERSION},
        "artifacts": sorted(str(Path(p)) for p in artifacts),
    }
    if extra:
        manifest.update(extra)
    path = out / f"manifest.{command}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------- subcommands

def cmd_synth_data(cfg: RunConfig):
    spec = data.default_synthetic_spec(cfg.M, cfg.n, cfg.malware_fraction, cfg.overlap)
    full = data.synth_generate(spec, seeding.derive_seed(cfg.seed, seeding.DATA))
    return _write_split(full, Path(cfg.out) / "data", cfg), {}


def cmd_featurize(cfg: RunConfig):
    """Reports live in ``<reports>/benign/*.json`` and ``<reports>/malware/*.json``."""
    if not cfg.reports or not cfg.vocab:
        raise ConfigError("reports and vocab must be set for featurize")
    root = Path(cfg.reports)
    vocab = data.FeatureVocabulary.load(_require(Path(cfg.vocab), "featurize (vocabulary file)"))
    rows, labels = [], []
    for label, sub in ((0, "benign"), (1, "malware")):
        for path in sorted((root / sub).glob("*.json")):
            try:
                report = data.parse_cuckoo_report(path.read_bytes())
            except data.ReportError as exc:
                raise ConfigError(f"{path}: {exc}") from None
            rows.append(data.vectorize(report, vocab))
            labels.append(label)
    if not rows:
        raise ConfigError(f"no reports found under {root}/benign or {root}/malware")
    full = data.LabeledDataset(np.array(rows), np.array(labels))
    return _write_split(full, Path(cfg.out) / "data", cfg), {"n_reports": len(rows)}


def cmd_select_features(cfg: RunConfig):
    d = _data_dir(cfg)
    full = data.load_csv(_require(d / "full.csv", "synth-data"))
    if cfg.k > full.n_features:
        raise ConfigError(f"k: {cfg.k} exceeds the {full.n_features} available features")
    idx, reduced = data.select_features(full, cfg.k, seeding.derive_seed(cfg.seed, seeding.SELECT))
    out = Path(cfg.out) / "selected"
    paths = _write_split(reduced, out, cfg)
    (out / "features.txt").write_text("".join(f"{i}\n" for i in idx))
    return paths + [out / "features.txt"], {}


def cmd_train_blackbox(cfg: RunConfig):
    train, test = _load_split(cfg)
    out = Path(cfg.out) / "models"
    out.mkdir(parents=True, exist_ok=True)
    paths, tpr = [], {}
    for kind in cfg.kinds:
        model = experiments.fit_blackbox(kind, train, cfg.seed)
        detectors.save_model(model, out / f"{kind}.model")
        paths.append(out / f"{kind}.model")
        tpr[kind] = detectors.true_positive_rate(model, test.malware)
        print(f"{kind}: test TPR {tpr[kind]:.4f}")
    return paths, {"test_tpr": tpr}


def _load_blackbox(cfg, kind):
    return detectors.load_model(_require(Path(cfg.out) / "models" / f"{kind}.model",
                                         "train-blackbox"))


def _gan_path(cfg, kind, variant):
    return Path(cfg.out) / "gans" / f"{kind}_{variant}.gan"


def cmd_train_gan(cfg: RunConfig):
    train, test = _load_split(cfg)
    out = Path(cfg.out) / "gans"
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for kind in cfg.kinds:
        bb = _load_blackbox(cfg, kind)
        for variant in cfg.variants:
            g, stats = experiments.train_attack(kind, variant, bb, train, test.malware,
                                                cfg.gan_config(train.n_features), cfg.seed)
            gan.save_gan(g, _gan_path(cfg, kind, variant))
            stats.to_csv(out / f"{kind}_{variant}_stats.csv")
            paths += [_gan_path(cfg, kind, variant), out / f"{kind}_{variant}_stats.csv"]
            print(f"{variant} vs {kind}: final probe TPR {stats.epochs[-1].adv_tpr:.4f}")
    return paths, {}


def cmd_evaluate(cfg: RunConfig):
    train, test = _load_split(cfg)
    report = experiments.AttackReport()
    for kind in cfg.kinds:
        bb = _load_blackbox(cfg, kind)
        for variant in cfg.variants:
            g = gan.load_gan(_require(_gan_path(cfg, kind, variant), "train-gan"))
            rel = str(_gan_path(cfg, kind, variant).relative_to(cfg.out))
            report.cells.append(experiments.attack_cell(kind, variant, bb, g, train, test,
                                                        cfg.seed, rel))
    out = Path(cfg.out) / "reports"
    out.mkdir(parents=True, exist_ok=True)
    paths = [experiments.emit_report(report, "csv", out / "attack_report.csv"),
             experiments.emit_report(report, "markdown", out / "attack_report.md")]
    print(paths[1].read_text())
    return paths, {}


def cmd_retrain_defense(cfg: RunConfig):
    train, test = _load_split(cfg)
    report = experiments.RetrainReport()
    for kind in cfg.retrain_kinds:
        bb = _load_blackbox(cfg, kind)
        g = gan.load_gan(_require(_gan_path(cfg, kind, cfg.retrain_variant), "train-gan"))
        report.rows.append(experiments.retrain_defense(
            kind, cfg.retrain_variant, train, test, cfg.rounds, cfg.gan_config(train.n_features),
            cfg.seed, attack=(bb, g)))
    out = Path(cfg.out) / "reports"
    out.mkdir(parents=True, exist_ok=True)
    paths = [experiments.emit_report(report, "csv", out / "retrain_report.csv"),
             experiments.emit_report(report, "markdown", out / "retrain_report.md")]
    print(paths[1].read_text())
    return paths, {}


GRADCHECK_TOL = 1e-4
GRADCHECK_TOL_BATCHNORM = 1e-3


def gradcheck_suite(n_seeds: int = 20):
    """Finite-difference checks at toy size (M=8, Z=4) for every layer type
    and both losses. Returns rows ``(name, max_error, tol)``."""
    rows = []
    for seed in range(n_seeds):
        rng = np.random.default_rng([seed, 99])
        X = rng.random((6, 8))
        target = (rng.random((6, 1)) < 0.5).astype(float)
        for kind in (numnet.LEAST_SQUARES, numnet.BCE):
            for hidden in ("Sigmoid", "ReLU", "LeakyReLU"):
                act = {"Sigmoid": numnet.Sigmoid, "ReLU": numnet.ReLU,
                       "LeakyReLU": lambda: numnet.LeakyReLU(0.2)}[hidden]
                net = numnet.dense_stack([8, 5, 1], act, numnet.Sigmoid, rng)
                res = numnet.grad_check(net, kind, X, target, tol=GRADCHECK_TOL)
                rows.append((f"seed{seed}/{kind}/{hidden}", res.max_relative_error, GRADCHECK_TOL))
            net = numnet.dense_stack([8, 5, 5, 1], lambda: numnet.LeakyReLU(0.2), numnet.Sigmoid,
                                     rng, batchnorm=True)
            # h = 1e-4 can step across a LeakyReLU kink; 1e-5 stays clear of
            # both the kink and round-off on near-zero BatchNorm gradients
            res = numnet.grad_check(net, kind, X, target, h=1e-5, tol=GRADCHECK_TOL_BATCHNORM)
            rows.append((f"seed{seed}/{kind}/BatchNorm", res.max_relative_error,
                         GRADCHECK_TOL_BATCHNORM))
        for name, err in gan.gan_gradcheck(seed, M=8, Z=4).items():
            tol = GRADCHECK_TOL_BATCHNORM if name.endswith("L_G") else GRADCHECK_TOL
            rows.append((f"seed{seed}/{name}", err, tol))
    return rows


def cmd_gradcheck(cfg: RunConfig):
    rows = gradcheck_suite(cfg.gradcheck_seeds)
    out = Path(cfg.out) / "reports"
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"{name}\t{err:.3e}\t{'ok' if err < tol else 'FAIL'} (tol {tol:g})"
             for name, err, tol in rows]
    worst = max(rows, key=lambda r: r[1] / r[2])
    summary = (f"{len(rows)} checks, {sum(e >= t for _, e, t in rows)} failed; "
               f"worst {worst[0]} {worst[1]:.3e} (tol {worst[2]:g})")
    (out / "gradcheck.txt").write_text("\n".join(lines + [summary]) + "\n")
    print(summary)
    failed = any(e >= t for _, e, t in rows)
    return [out / "gradcheck.txt"], {"gradcheck_failed": failed}


COMMANDS = {
    "synth-data": cmd_synth_data,
    "featurize": cmd_featurize,
    "select-features": cmd_select_features,
    "train-blackbox": cmd_train_blackbox,
    "train-gan": cmd_train_gan,
    "evaluate": cmd_evaluate,
    "retrain-defense": cmd_retrain_defense,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mald2gan", description="Mal-D2GAN experiment runner")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="key=value configuration file")
    p.add_argument("-v", "--verbose", action="store_true")
    for name in _FIELDS:
        flags = [f"--{name}"]
        if "_" in name:
            flags.append(f"--{name.replace('_', '-')}")
        p.add_argument(*flags, dest=f"opt_{name}", metavar=name.upper(), default=None)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        text = Path(args.config).read_text() if args.config else ""
        overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("opt_") and v is not None}
        cfg = parse_config(text, overrides)
        print(cfg.to_text(), end="")
        t0 = time.perf_counter()
        artifacts, extra = COMMANDS[args.command](cfg)
        extra["runtime_seconds"] = round(time.perf_counter() - t0, 3)
        _write_manifest(cfg, args.command, artifacts, extra)
    except (ConfigError, DatasetError, container.ContainerError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        log.exception("runtime failure")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    return 1 if extra.get("gradcheck_failed") else 0


if __name__ == "__main__":
    sys.exit(main())
