"""Seeded desk-scale experiments on synthetic styled scenes.

``diversity_experiment`` compares models trained on three localized scenes
with models trained on three diverse scenes. ``shift_benchmark`` trains on a
localized set and tests on scenes at graded style distance, which is where the
confidence indicator and routing are assessed.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .exceptions import ValidationError
from .fcn import FcnConfig, FcnModel
from .metrics import ConfusionMatrix, confusion, kappa
from .pipeline import run_pipeline
from .synth import generate_scene, generate_scenes, graded_styles, make_style, style_pool
from .training import TrainConfig, evaluate_split, train

# Small enough to train in seconds on one core; used by every experiment so the
# compared arms share one protocol.
DESK_MODEL = FcnConfig(in_bands=4, num_classes=2, base_channels=8, depth=2, seed=0)
DESK_TRAIN = TrainConfig(learning_rate=1e-3, epochs=20, patch_size=32, batch_size=8,
                         patches_per_scene_per_epoch=16, seed=0)
N_TRAIN_SCENES = 3


def _rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


@dataclass
class DiversityRow:
    rep: int
    kappa_localized: float
    kappa_diverse: float
    hash_localized: str
    hash_diverse: str
    groups_localized: list = field(default_factory=list)
    groups_diverse: list = field(default_factory=list)


@dataclass
class DiversityResult:
    rows: list
    mean_localized: float
    mean_diverse: float
    diverse_wins: int
    sign_test_p: float
    protocol_hash: str

    def table_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rep", "kappa_localized", "kappa_diverse"])
        for r in self.rows:
            w.writerow([r.rep, f"{r.kappa_localized:.4f}", f"{r.kappa_diverse:.4f}"])
        w.writerow(["mean", f"{self.mean_localized:.4f}", f"{self.mean_diverse:.4f}"])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"


def diversity_experiment(seed: int = 0, reps: int = 5, model_cfg: FcnConfig = DESK_MODEL,
                         train_cfg: TrainConfig = DESK_TRAIN, size: int = 96, n_test: int = 6,
                         progress=None) -> DiversityResult:
    """Localized vs diverse training sets of three scenes, same protocol, same held-out test set.

    Within a repetition both arms share the model seed, the training seed and
    the test scenes; only the style pool of the training scenes differs.
    """
    if reps < 3:
        raise ValidationError("the diversity experiment needs at least 3 repetitions")
    rows = []
    for rep in range(reps):
        root = np.random.SeedSequence([seed, rep])
        test_seq, train_seq = root.spawn(2)
        trng = _rng(test_seq)
        test = generate_scenes(style_pool("diverse", n_test, trng, "heldout-"), trng, size, "test")
        mcfg = FcnConfig(model_cfg.in_bands, model_cfg.num_classes, model_cfg.base_channels,
                         model_cfg.depth, seed=int(train_seq.generate_state(1)[0]) % 2 ** 24)
        tcfg = TrainConfig(**{**asdict(train_cfg), "seed": mcfg.seed})
        kappas, hashes, groups = {}, {}, {}
        for kind in ("localized", "diverse"):
            rng = _rng(train_seq)
            scenes = generate_scenes(style_pool(kind, N_TRAIN_SCENES, rng), rng, size, "train")
            model, report = train(scenes, mcfg, tcfg)
            _, pooled = evaluate_split(model, test, "test")
            kappas[kind] = kappa(pooled)
            hashes[kind] = report.config_hash
            groups[kind] = [s.group for s in scenes]
        if hashes["localized"] != hashes["diverse"]:
            raise AssertionError("training protocol differs between arms")
        row = DiversityRow(rep, kappas["localized"], kappas["diverse"], hashes["localized"],
                           hashes["diverse"], groups["localized"], groups["diverse"])
        rows.append(row)
        if progress is not None:
            progress(row)
    wins = sum(r.kappa_diverse > r.kappa_localized for r in rows)
    p = stats.binomtest(wins, reps, 0.5, alternative="greater").pvalue
    return DiversityResult(
        rows=rows,
        mean_localized=float(np.mean([r.kappa_localized for r in rows])),
        mean_diverse=float(np.mean([r.kappa_diverse for r in rows])),
        diverse_wins=int(wins),
        sign_test_p=float(p),
        protocol_hash=rows[0].hash_localized,
    )


def shift_benchmark_scenes(seed: int = 42, n_test: int = 10, size: int = 96) -> tuple:
    """Three localized training scenes and ``n_test`` test scenes at graded shift."""
    rng = _rng(seed)
    train_scenes = generate_scenes(style_pool("localized", N_TRAIN_SCENES, rng), rng, size, "train")
    test_scenes = generate_scenes(graded_styles(n_test, rng), rng, size, "test")
    return train_scenes, test_scenes


@dataclass
class ShiftBenchmarkResult:
    scene_ids: list
    beta: list
    beta_norm: list
    kappa_supervised: list
    kappa_unsupervised: list
    routes: list
    spearman: float
    pooled_kappa_supervised: float
    pooled_kappa_pipeline: float
    pooled_kappa_unsupervised: float
    lowest_scene: str
    tau: float


def evaluate_shift_benchmark(model: FcnModel, test_scenes, tau: float = 0.5) -> ShiftBenchmarkResult:
    outcomes = run_pipeline(model, test_scenes, tau, always_unsupervised=True)
    by_id = {s.scene_id: s for s in test_scenes}
    cm_sup, cm_unsup, cm_pipe = [], [], []
    for o in outcomes:
        ref = by_id[o.scene_id].mask
        cm_sup.append(confusion(o.supervised, ref))
        cm_unsup.append(confusion(o.unsupervised, ref))
        cm_pipe.append(confusion(o.mask, ref))
    bn = [o.confidence.beta_norm for o in outcomes]
    ks = [kappa(c) for c in cm_sup]
    rho = stats.spearmanr(bn, ks)[0]
    lowest = outcomes[int(np.argmin(bn))].scene_id
    return ShiftBenchmarkResult(
        scene_ids=[o.scene_id for o in outcomes],
        beta=[o.confidence.beta for o in outcomes],
        beta_norm=bn,
        kappa_supervised=ks,
        kappa_unsupervised=[kappa(c) for c in cm_unsup],
        routes=[o.route for o in outcomes],
        spearman=float(rho),
        pooled_kappa_supervised=kappa(ConfusionMatrix.pooled(cm_sup)),
        pooled_kappa_pipeline=kappa(ConfusionMatrix.pooled(cm_pipe)),
        pooled_kappa_unsupervised=kappa(ConfusionMatrix.pooled(cm_unsup)),
        lowest_scene=lowest,
        tau=tau,
    )


def shift_benchmark(seed: int = 42, n_test: int = 10, tau: float = 0.5,
                    model_cfg: FcnConfig = DESK_MODEL, train_cfg: TrainConfig = DESK_TRAIN,
                    size: int = 96) -> tuple:
    """Train on the localized set and evaluate confidence and routing on graded-shift scenes."""
    train_scenes, test_scenes = shift_benchmark_scenes(seed, n_test, size)
    model, _ = train(train_scenes, model_cfg, train_cfg)
    return model, evaluate_shift_benchmark(model, test_scenes, tau)


# Default-sized network; 8 patches per epoch at batch 8 is one step per epoch.
OVERFIT_MODEL = FcnConfig(in_bands=4, num_classes=2, base_channels=16, depth=3, seed=0)
OVERFIT_TRAIN = TrainConfig(learning_rate=1e-3, epochs=200, patch_size=64, batch_size=8,
                            patches_per_scene_per_epoch=8, seed=0)


def overfit_check(seed: int = 0, size: int = 128, model_cfg: FcnConfig = OVERFIT_MODEL,
                  train_cfg: TrainConfig = OVERFIT_TRAIN) -> tuple:
    """Train on one scene and score the model on that same scene.

    Returns ``(kappa, report)``.
    """
    rng = _rng(seed)
    scene = generate_scene(make_style(0.1, int(rng.integers(2 ** 31))), rng, size, "overfit", "train")
    model, report = train([scene], model_cfg, train_cfg)
    _, pooled = evaluate_split(model, [scene], "train")
    return kappa(pooled), report
