"""Attack grids and the retraining arms race.

``evaluate_attack`` fits every black-box detector once and trains a fresh GAN
of each variant against it. ``retrain_defense`` plays the defender: fold
adversarial vectors back into the training set for a number of rounds, then
lets the attacker resume GAN training against the hardened detector.

Rates in reports are fractions in [0, 1]; the markdown writer turns them into
percentages.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import detectors, gan, seeding
from .dataset import LabeledDataset
from .gan import GanConfig

log = logging.getLogger(__name__)

RETRAIN_KINDS = ("RF", "DT", "AB", "GB", "KNN")
AUGMENT_FRACTION = 0.25


def attack_success_rate(adversarial_tpr: float) -> float:
    if not 0.0 <= adversarial_tpr <= 1.0:
        raise ValueError(f"TPR {adversarial_tpr} is outside [0, 1]")
    return 1.0 - adversarial_tpr


def _fmt(x: float) -> str:
    return repr(float(x))


def _pct(x: float) -> str:
    return f"{100.0 * x:.2f}"


# ---------------------------------------------------------------- reports

@dataclass
class AttackCell:
    detector: str
    variant: str
    original_train: float
    original_test: float
    adversarial_train: float
    adversarial_test: float
    seed: int
    gan_path: str = ""


@dataclass
class AttackReport:
    cells: list[AttackCell] = field(default_factory=list)

    FIELDS = ("detector", "variant", "original_train", "original_test", "adversarial_train",
              "adversarial_test", "seed", "gan_path")

    def cell(self, detector: str, variant: str) -> AttackCell:
        for c in self.cells:
            if c.detector == detector and c.variant == variant:
                return c
        raise KeyError((detector, variant))

    def mean_adversarial_test(self, variant: str) -> float:
        vals = [c.adversarial_test for c in self.cells if c.variant == variant]
        return float(np.mean(vals)) if vals else float("nan")


@dataclass
class RetrainRow:
    detector: str
    variant: str
    before: float
    after: float
    round_tpr: list[float]
    seed: int


@dataclass
class RetrainReport:
    rows: list[RetrainRow] = field(default_factory=list)

    FIELDS = ("detector", "variant", "before", "after", "round_tpr", "seed")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def emit_report(report, fmt: str, path) -> Path:
    """Write an AttackReport or RetrainReport as ``csv`` or ``markdown``."""
    path = Path(path)
    if fmt not in ("csv", "markdown"):
        raise ValueError(f"unknown report format {fmt!r}")
    if isinstance(report, AttackReport):
        if fmt == "csv":
            _write_csv(path, report.FIELDS,
                       [[c.detector, c.variant, _fmt(c.original_train), _fmt(c.original_test),
                         _fmt(c.adversarial_train), _fmt(c.adversarial_test), c.seed, c.gan_path]
                        for c in report.cells])
        else:
            path.write_text(_attack_markdown(report))
    elif isinstance(report, RetrainReport):
        if fmt == "csv":
            _write_csv(path, report.FIELDS,
                       [[r.detector, r.variant, _fmt(r.before), _fmt(r.after),
                         ";".join(_fmt(t) for t in r.round_tpr), r.seed] for r in report.rows])
        else:
            path.write_text(_retrain_markdown(report))
    else:
        raise TypeError(f"cannot emit {type(report).__name__}")
    return path


def _ordered(items):
    return list(dict.fromkeys(items))


def _attack_markdown(report: AttackReport) -> str:
    variants = _ordered(c.variant for c in report.cells)
    kinds = _ordered(c.detector for c in report.cells)
    out = []
    for split, orig, adv in (("training", "original_train", "adversarial_train"),
                             ("test", "original_test", "adversarial_test")):
        out.append(f"True positive rate (%) on the {split} set, original vs adversarial\n")
        head = ["Detector"] + [f"{v} {col}" for v in variants for col in ("Original", "Adver.")]
        out.append("| " + " | ".join(head) + " |")
        out.append("|" + "---|" * len(head))
        for k in kinds:
            row = [k]
            for v in variants:
                c = report.cell(k, v)
                row += [_pct(getattr(c, orig)), _pct(getattr(c, adv))]
            out.append("| " + " | ".join(row) + " |")
        out.append("")
    return "\n".join(out)


def _retrain_markdown(report: RetrainReport) -> str:
    out = ["True positive rate (%) after the black-box detector is retrained\n",
           "| Detector | Variant | Before retraining GAN | After retraining GAN |",
           "|---|---|---|---|"]
    for r in report.rows:
        out.append(f"| {r.detector} | {r.variant} | {_pct(r.before)} | {_pct(r.after)} |")
    return "\n".join(out) + "\n"


def load_attack_csv(path) -> AttackReport:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return AttackReport([AttackCell(r["detector"], r["variant"], float(r["original_train"]),
                                    float(r["original_test"]), float(r["adversarial_train"]),
                                    float(r["adversarial_test"]), int(r["seed"]), r["gan_path"])
                         for r in rows])


def load_retrain_csv(path) -> RetrainReport:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return RetrainReport([RetrainRow(r["detector"], r["variant"], float(r["before"]),
                                     float(r["after"]),
                                     [float(t) for t in r["round_tpr"].split(";") if t],
                                     int(r["seed"]))
                          for r in rows])


# ---------------------------------------------------------------- attack grid

def _index(seq, item):
    return list(seq).index(item)


def fit_blackbox(kind: str, train: LabeledDataset, master_seed: int, params=None):
    seed = seeding.derive_seed(master_seed, seeding.DETECTOR, _index(detectors.KINDS, kind))
    return detectors.fit(kind, train, (params or {}).get(kind), seed=seed)


def train_attack(kind: str, variant: str, blackbox, train: LabeledDataset, probe,
                 config: GanConfig, master_seed: int):
    """Fresh GAN of ``variant`` trained against ``blackbox``; returns (gan, stats)."""
    seed = seeding.derive_seed(master_seed, seeding.GAN, _index(detectors.KINDS, kind),
                               _index(gan.VARIANTS, variant))
    g = gan.build_variant(variant, config.replace(M=train.n_features, seed=seed))
    stats = gan.train(g, blackbox, train, probe=probe)
    return g, stats


def attack_cell(kind, variant, blackbox, g, train, test, master_seed, gan_path="",
                original=None) -> AttackCell:
    """Original and adversarial TPR of one trained (detector, GAN) pair."""
    if original is None:
        original = (detectors.true_positive_rate(blackbox, train.malware),
                    detectors.true_positive_rate(blackbox, test.malware))
    rng = seeding.derive_rng(master_seed, seeding.GENERATE, _index(detectors.KINDS, kind),
                             _index(gan.VARIANTS, variant))
    adv_train = float(blackbox.predict(gan.generate_adversarial_dataset(g, train.malware, rng)).mean())
    adv_test = float(blackbox.predict(gan.generate_adversarial_dataset(g, test.malware, rng)).mean())
    return AttackCell(kind, variant, original[0], original[1], adv_train, adv_test,
                      g.config.seed, gan_path)


def evaluate_attack(train: LabeledDataset, test: LabeledDataset, variants=gan.VARIANTS,
                    kinds=detectors.KINDS, config: GanConfig | None = None, master_seed: int = 0,
                    detector_params: dict | None = None, out_dir=None) -> AttackReport:
    """One row per (detector, variant): original and adversarial TPR on both splits.

    With ``out_dir`` set, detectors, GAN checkpoints and per-cell training
    curves are written under it and referenced by relative path in the report.
    """
    config = config or GanConfig()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "cells").mkdir(parents=True, exist_ok=True)
    report = AttackReport()
    for kind in kinds:
        t0 = time.perf_counter()
        bb = fit_blackbox(kind, train, master_seed, detector_params)
        orig_train = detectors.true_positive_rate(bb, train.malware)
        orig_test = detectors.true_positive_rate(bb, test.malware)
        if out is not None:
            detectors.save_model(bb, out / "cells" / f"{kind}.model")
        log.info("%s fitted in %.1fs, test TPR %.4f", kind, time.perf_counter() - t0, orig_test)
        for variant in variants:
            t0 = time.perf_counter()
            g, stats = train_attack(kind, variant, bb, train, test.malware, config, master_seed)
            rel = ""
            if out is not None:
                rel = f"cells/{kind}_{variant}.gan"
                gan.save_gan(g, out / rel)
                stats.to_csv(out / "cells" / f"{kind}_{variant}_stats.csv")
            cell = attack_cell(kind, variant, bb, g, train, test, master_seed, rel,
                               (orig_train, orig_test))
            report.cells.append(cell)
            log.info("%s vs %s: adversarial test TPR %.4f (%.1fs)", variant, kind,
                     cell.adversarial_test, time.perf_counter() - t0)
    return report


# ---------------------------------------------------------------- arms race

def retrain_defense(kind: str, variant: str, train: LabeledDataset, test: LabeledDataset,
                    rounds: int = 5, config: GanConfig | None = None, master_seed: int = 0,
                    detector_params: dict | None = None, attack=None) -> RetrainRow:
    """Defender refits ``rounds`` times on adversarial data, then the attacker
    resumes GAN training for ``config.retrain_epochs`` against the result.

    ``attack`` may pass an already trained ``(blackbox, gan)`` pair; otherwise
    both are built exactly as ``evaluate_attack`` builds them.
    """
    if rounds < 1:
        raise ValueError(f"rounds must be at least 1, got {rounds}")
    config = config or GanConfig()
    k_i, v_i = _index(detectors.KINDS, kind), _index(gan.VARIANTS, variant)
    if attack is None:
        bb = fit_blackbox(kind, train, master_seed, detector_params)
        g, _ = train_attack(kind, variant, bb, train, test.malware, config, master_seed)
    else:
        bb, g = attack
    params = (detector_params or {}).get(kind)
    n_aug = max(1, int(round(AUGMENT_FRACTION * len(train.malware))))
    rng = seeding.derive_rng(master_seed, seeding.RETRAIN, k_i, v_i)
    augmented = train
    round_tpr = []
    for r in range(1, rounds + 1):
        rows = rng.choice(len(train.malware), n_aug, replace=False)
        adv = gan.generate_adversarial_dataset(g, train.malware[rows], rng)
        augmented = augmented.concat(LabeledDataset(adv, np.ones(len(adv), dtype=np.uint8)))
        bb = detectors.fit(kind, augmented, params,
                           seed=seeding.derive_seed(master_seed, seeding.RETRAIN, k_i, v_i, r))
        round_tpr.append(float(bb.predict(adv).mean()))
        log.info("%s round %d: TPR on its own adversarial set %.4f", kind, r, round_tpr[-1])
    # pre-retrained GAN, fresh noise, hardened detector
    before = float(bb.predict(gan.generate_adversarial_dataset(g, test.malware, rng)).mean())
    gan.train(g, bb, train, epochs=config.retrain_epochs, probe=test.malware)
    after = float(bb.predict(gan.generate_adversarial_dataset(g, test.malware, rng)).mean())
    return RetrainRow(kind, variant, before, after, round_tpr, g.config.seed)


def retrain_grid(train, test, kinds=RETRAIN_KINDS, variant=gan.MALD2GAN, rounds=5,
                 config=None, master_seed=0, detector_params=None) -> RetrainReport:
    return RetrainReport([retrain_defense(k, variant, train, test, rounds, config, master_seed,
                                          detector_params) for k in kinds])
