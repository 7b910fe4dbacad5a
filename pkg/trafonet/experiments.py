from __future__ import annotations
import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from .agents import (
    ActionGrid,
    Agent,
    DqnAgent,
    DqnConfig,
    EpsilonSchedule,
    GreedyActorPolicy,
    GreedyQPolicy,
    OraclePolicy,
    PpoAgent,
    PpoConfig,
    RandomPolicy,
    evaluate,
    eval_fluxes,
    train,
)
from .catalog import mlp_spec
from .config import RunConfig
from .conv import build_oltc_cnn
from .dsp import StftConfig
from .env import CoreModel, EnergizeEnv, EnvConfig, oracle_best_angle
from .errors import ConfigError, DivergenceError, StateError, ValidationError
from .nn import Network, SgdConfig, accuracy, confusion_matrix, fit, grad_check, one_hot, predict
from .oltc import (
    N_STATES,
    LabeledClip,
    OltcState,
    SynthConfig,
    add_noise,
    background_noise,
    class_means,
    clip_features,
    estimate_noise_profile,
    generate_dataset,
    nearest_mean_predict,
    spectral_denoise,
)
from .record import ExperimentRecord, summarize
from .report import render_oltc_report, render_rl_report
from .seeding import derive_seed
from .storage import Storage, load_checkpoint, save_checkpoint
from .types import Activation, Algo, LossKind, NoiseColor, ScheduleKind

log = logging.getLogger(__name__)

GRADCHECK_TOL = 1e-5
SMALL_DATA = 5


# --------- Gradient checks ---------

def run_gradcheck(cfg: RunConfig) -> Dict[str, float]:
    """Max relative error of the reference MLPs and the OLTC CNN against finite differences."""
    seed = cfg.seed
    step = cfg.get("nn", "grad_step")
    rng = np.random.default_rng(derive_seed(seed, "gradcheck"))
    results: Dict[str, float] = {}

    x = rng.standard_normal((5, 3))
    mse_net = Network.from_spec(
        mlp_spec([3, 8, 4, 2], Activation.SOFTPLUS, Activation.LINEAR, LossKind.MSE), derive_seed(seed, "mlp_mse")
    )
    results["mlp_mse"] = grad_check(mse_net, x, rng.standard_normal((5, 2)), step).max_error

    ce_net = Network.from_spec(
        mlp_spec([3, 8, 4, 2], Activation.SOFTPLUS, Activation.SOFTMAX, LossKind.CROSS_ENTROPY),
        derive_seed(seed, "mlp_ce"),
    )
    results["mlp_ce"] = grad_check(ce_net, x, one_hot(rng.integers(0, 2, size=5), 2), step).max_error

    cnn = Network.from_spec(build_oltc_cnn(8, 8, 3, conv_activation=Activation.SOFTPLUS), derive_seed(seed, "cnn"))
    xc = rng.standard_normal((2, 8, 8, 1))
    report = grad_check(cnn, xc, one_hot(np.array([0, 2]), 3), step, max_entries=40, seed=derive_seed(seed, "sample"))
    results["oltc_cnn"] = report.max_error

    for name, err in results.items():
        level = logging.INFO if err < GRADCHECK_TOL else logging.WARNING
        log.log(level, "gradcheck %s: max relative error %.3g", name, err)
    return results


# --------- OLTC pipeline ---------

def synth_config(cfg: RunConfig, seed: int) -> SynthConfig:
    s = cfg["synth"]
    return SynthConfig(s["sample_rate_hz"], s["segment_samples"], seed, s["jitter"])


def stft_config(cfg: RunConfig) -> StftConfig:
    d = cfg["dsp"]
    return StftConfig(d["window_len"], d["hop"], d["window_fn"])


def _features(clips: Sequence[LabeledClip], cfg: RunConfig) -> np.ndarray:
    d = cfg["dsp"]
    stft_cfg = stft_config(cfg)
    return np.stack([clip_features(c, stft_cfg, d["n_mels"], d["f_min"], d["f_max"]) for c in clips])


def _labels(clips: Sequence[LabeledClip]) -> np.ndarray:
    return np.array([int(c.label) - 1 for c in clips], dtype=np.int64)


class FeatureScaler:
    """Global standardisation of dB Mel features, fitted on the training set."""

    def __init__(self, mean: float, std: float) -> None:
        self.mean = float(mean)
        self.std = float(std) if std > 0 else 1.0

    @staticmethod
    def fit(features: np.ndarray) -> "FeatureScaler":
        return FeatureScaler(features.mean(), features.std())

    def __call__(self, features: np.ndarray) -> np.ndarray:
        return ((features - self.mean) / self.std)[..., None]

    def to_dict(self) -> Dict[str, float]:
        return {"mean": self.mean, "std": self.std}


def check_oltc_config(cfg: RunConfig) -> None:
    """Fail on inconsistent settings before generating any audio."""
    synth_config(cfg, 0)
    stft_cfg = stft_config(cfg)
    s, d = cfg["synth"], cfg["dsp"]
    if s["n_per_class"] < 1 or s["n_test_per_class"] < 1:
        raise ConfigError("synth.n_per_class and synth.n_test_per_class must be >= 1")
    if s["segment_samples"] < stft_cfg.window_len:
        raise ConfigError(f"synth.segment_samples {s['segment_samples']} shorter than dsp.window_len {stft_cfg.window_len}")
    if not 0.0 <= d["f_min"] < d["f_max"] <= s["sample_rate_hz"] / 2.0:
        raise ConfigError(f"need 0 <= dsp.f_min < dsp.f_max <= Fs/2, got {d['f_min']}, {d['f_max']}")
    if cfg.get("nn", "epochs") < 1:
        raise ConfigError("nn.epochs must be >= 1")
    SgdConfig(cfg.get("nn", "learning_rate"), cfg.get("nn", "momentum"), cfg.get("nn", "batch_size"))


def _noisy(clips: Sequence[LabeledClip], snr_db: float, color: NoiseColor, seed: int) -> List[LabeledClip]:
    return [add_noise(c, snr_db, color, derive_seed(seed, "noise", snr_db, i)) for i, c in enumerate(clips)]


def _denoised(clips: Sequence[LabeledClip], cfg: RunConfig, color: NoiseColor, seed: int) -> List[LabeledClip]:
    """
    Each noisy clip is cleaned with a profile estimated from a separate noise-only
    capture of its environment (the background recorded before the event). Only
    the background level is shared with the clip; the clean reference is never read.
    """
    s = cfg["synth"]
    stft_cfg = stft_config(cfg)
    out = []
    for i, c in enumerate(clips):
        if c.noise_power is None:
            raise StateError(f"clip {i} has no background level to capture; add noise first")
        capture = background_noise(
            c.signal.samples.size, c.signal.sample_rate_hz, c.noise_power, color, derive_seed(seed, "capture", c.snr_db, i)
        )
        profile = estimate_noise_profile(capture, stft_cfg)
        out.append(spectral_denoise(c, profile, s["denoise_alpha"], s["denoise_beta"]))
    return out


def _augmented(clips: Sequence[LabeledClip], cfg: RunConfig, color: NoiseColor, seed: int) -> List[LabeledClip]:
    """
    One denoised noisy copy per training clip, at an SNR drawn from
    synth.augment_snr_levels. Noise and background captures use their own seeds.
    """
    levels = cfg.get("synth", "augment_snr_levels")
    if not levels:
        return []
    rng = np.random.default_rng(derive_seed(seed, "augment"))
    picks = rng.integers(0, len(levels), size=len(clips))
    noisy = [
        add_noise(c, levels[k], color, derive_seed(seed, "train_noise", levels[k], i))
        for i, (c, k) in enumerate(zip(clips, picks))
    ]
    return _denoised(noisy, cfg, color, derive_seed(seed, "train_capture"))


def run_oltc_experiment(cfg: RunConfig, storage: Optional[Storage] = None) -> ExperimentRecord:
    """
    Synthetic dataset -> Mel spectrograms -> reference CNN; reports train/test accuracy,
    the test confusion matrix, a nearest-class-mean baseline and accuracy vs SNR with
    and without spectral subtraction.
    """
    check_oltc_config(cfg)
    seed = cfg.seed
    s, n = cfg["synth"], cfg["nn"]
    record = ExperimentRecord(name="oltc", seed=seed, config=cfg.to_dict())
    if s["n_per_class"] < SMALL_DATA:
        log.warning("only %d training clips per class: accuracy will be degenerate", s["n_per_class"])

    color = NoiseColor(s["noise_color"])
    train_clips = generate_dataset(s["n_per_class"], synth_config(cfg, derive_seed(seed, "train")))
    augmented = _augmented(train_clips, cfg, color, seed)
    if augmented:
        log.info("added %d denoised training copies at SNR %s dB", len(augmented), list(s["augment_snr_levels"]))
    train_clips = train_clips + augmented
    test_clips = generate_dataset(s["n_test_per_class"], synth_config(cfg, derive_seed(seed, "test")))
    f_train, f_test = _features(train_clips, cfg), _features(test_clips, cfg)
    y_train, y_test = _labels(train_clips), _labels(test_clips)
    scaler = FeatureScaler.fit(f_train)
    x_train, x_test = scaler(f_train), scaler(f_test)

    spec = build_oltc_cnn(f_train.shape[1], f_train.shape[2], N_STATES)
    net = Network.from_spec(spec, derive_seed(seed, "cnn"))
    sgd = SgdConfig(n["learning_rate"], n["momentum"], n["batch_size"], derive_seed(seed, "sgd"))
    log.info("training OLTC CNN: %d params, %d train / %d test clips", net.n_params(), len(train_clips), len(test_clips))
    for loss in fit(net, x_train, one_hot(y_train, N_STATES), sgd, n["epochs"]):
        record.log("epoch_loss", loss)

    pred_test = np.argmax(predict(net, x_test), axis=1)
    means = class_means(x_train, y_train, N_STATES)
    baseline = float(np.mean(nearest_mean_predict(means, x_test) == y_test))
    record.summary = {
        "train_accuracy": accuracy(net, x_train, y_train),
        "test_accuracy": float(np.mean(pred_test == y_test)),
        "baseline_accuracy": baseline,
        "confusion_matrix": confusion_matrix(y_test, pred_test, N_STATES).tolist(),
        "labels": [st.label for st in OltcState],
        "n_params": net.n_params(),
        "n_train_clips": len(train_clips),
    }

    curve = []
    for snr in s["snr_levels"]:
        noisy = _noisy(test_clips, snr, color, seed)
        acc_noisy = accuracy(net, scaler(_features(noisy, cfg)), y_test)
        acc_clean = accuracy(net, scaler(_features(_denoised(noisy, cfg, color, seed), cfg)), y_test)
        curve.append({"snr_db": float(snr), "accuracy": acc_noisy, "accuracy_denoised": acc_clean})
        record.log("snr_db", snr)
        record.log("accuracy_noisy", acc_noisy)
        record.log("accuracy_denoised", acc_clean)
        log.info("SNR %5.1f dB: accuracy %.3f, denoised %.3f", snr, acc_noisy, acc_clean)
    record.summary["snr_curve"] = curve
    record.finish()
    log.info(
        "OLTC test accuracy %.3f (baseline %.3f)", record.summary["test_accuracy"], record.summary["baseline_accuracy"]
    )

    if storage is not None:
        storage.save_config(cfg)
        storage.save_record(record)
        save_checkpoint(storage.path("oltc_cnn.ckpt"), net, {"scaler": scaler.to_dict(), "labels": record.summary["labels"]})
        storage.write_csv(
            "confusion.csv",
            [{"true": record.summary["labels"][i], **{str(j + 1): v for j, v in enumerate(row)}}
             for i, row in enumerate(record.summary["confusion_matrix"])],
            ["true"] + [str(j + 1) for j in range(N_STATES)],
        )
        storage.write_csv("snr_curve.csv", curve, ["snr_db", "accuracy", "accuracy_denoised"])
        storage.path("report.md").write_text(render_oltc_report(record), encoding="utf-8")
    return record


def evaluate_oltc_checkpoint(
    cfg: RunConfig,
    checkpoint: Path,
    snr_db: Optional[float] = None,
    denoise: bool = False,
) -> Dict[str, Any]:
    """Accuracy of a saved CNN on a freshly generated test set, optionally noisy/denoised."""
    check_oltc_config(cfg)
    net, meta = load_checkpoint(checkpoint)
    scaler = FeatureScaler(**meta["scaler"])
    seed = cfg.seed
    clips = generate_dataset(cfg.get("synth", "n_test_per_class"), synth_config(cfg, derive_seed(seed, "test")))
    color = NoiseColor(cfg.get("synth", "noise_color"))
    if snr_db is not None:
        clips = _noisy(clips, snr_db, color, seed)
        if denoise:
            clips = _denoised(clips, cfg, color, seed)
    elif denoise:
        raise ValidationError("denoising needs a noise level (--snr)")
    y = _labels(clips)
    pred = np.argmax(predict(net, scaler(_features(clips, cfg))), axis=1)
    return {
        "accuracy": float(np.mean(pred == y)),
        "confusion_matrix": confusion_matrix(y, pred, N_STATES).tolist(),
        "snr_db": snr_db,
        "denoised": denoise,
    }


# --------- RL ---------

def make_env(cfg: RunConfig) -> EnergizeEnv:
    c, e = cfg["core"], cfg["env"]
    env_seed = e["seed"] if e["seed"] is not None else derive_seed(cfg.seed, "env")
    return EnergizeEnv(
        CoreModel(c["lambda_sat"], c["l_mag"], c["l_air"]),
        EnvConfig(e["flux_max"], e["flux_limit"], e["action_bins"], e["gamma"], env_seed),
    )


def make_agent(algo, cfg: RunConfig, seed: int) -> Agent:
    algo = Algo(algo)
    a = cfg["agent"]
    grid = ActionGrid(cfg.get("env", "action_bins"))
    if algo == Algo.PPO:
        ppo = PpoConfig(
            a["hidden"], a["ppo_lr"], a["momentum"], a["clip_eps"], a["epochs_per_iter"],
            a["rollout_size"], a["minibatch"], a["entropy_coef"], Activation(a["ppo_activation"]),
        )
        return PpoAgent(grid, ppo, seed)
    kind = ScheduleKind.LINEAR if algo == Algo.DQN_LINEAR else ScheduleKind.EXPONENTIAL
    schedule = EpsilonSchedule(kind, a["eps0"], a["eps_min"], a["eps_horizon"], a["eps_tau"])
    dqn = DqnConfig(a["hidden"], a["dqn_lr"], a["momentum"], a["replay_capacity"], a["batch"], a["sync_every"], schedule)
    return DqnAgent(grid, dqn, seed)


def _agent_net(agent: Agent) -> Network:
    return agent.q_net if isinstance(agent, DqnAgent) else agent.actor


def train_rl(cfg: RunConfig, algo, storage: Optional[Storage] = None, steps: Optional[int] = None):
    """Train one algorithm; returns (agent, policy, record). Divergence propagates with its record."""
    algo = Algo(algo)
    steps = cfg.get("agent", "steps") if steps is None else steps
    seed = derive_seed(cfg.seed, "train", algo.value)
    env = make_env(cfg)
    agent = make_agent(algo, cfg, seed)
    log.info("training %s for %d steps", algo.value, steps)
    policy, record = train(agent, env, steps, seed, name=f"train-{algo.value}")
    record.config = cfg.to_dict()
    record.summary["algo"] = algo.value
    if storage is not None:
        storage.save_config(cfg)
        storage.save_record(record)
        _write_episode_csv(storage, f"{record.name}.csv", record)
        save_checkpoint(
            storage.path(f"{algo.value}.ckpt"), _agent_net(agent), {"algo": algo.value, "action_bins": agent.grid.n_bins}
        )
    return agent, policy, record


def _write_episode_csv(storage: Storage, name: str, record: ExperimentRecord) -> None:
    keys = [k for k in ("reward", "i_max", "epsilon") if k in record.metrics]
    n = len(record.metrics.get("reward", []))
    rows = [{"episode": i, **{k: record.metrics[k][i] for k in keys}} for i in range(n)]
    storage.write_csv(name, rows, ["episode"] + keys)


def policy_from_checkpoint(path: Path):
    net, meta = load_checkpoint(path)
    grid = ActionGrid(int(meta["action_bins"]))
    if str(meta.get("algo", "")).startswith("dqn"):
        return GreedyQPolicy(net, grid), meta
    return GreedyActorPolicy(net, grid), meta


def eval_seed(cfg: RunConfig) -> int:
    return derive_seed(cfg.seed, "eval")


def evaluate_rl_checkpoint(cfg: RunConfig, checkpoint: Path, n_episodes: Optional[int] = None, seed: Optional[int] = None):
    policy, meta = policy_from_checkpoint(checkpoint)
    env = make_env(cfg)
    if policy.grid.n_bins != env.n_bins:
        raise ConfigError(f"checkpoint uses {policy.grid.n_bins} action bins, config {env.n_bins}")
    n_episodes = cfg.get("agent", "eval_episodes") if n_episodes is None else n_episodes
    return evaluate(policy, env, n_episodes, eval_seed(cfg) if seed is None else seed)


def oracle_sweep(cfg: RunConfig, n_episodes: int, grid_deg: float, seed: Optional[int] = None) -> List[Dict[str, float]]:
    """Per-episode (phi1, phi2, phi3, theta*, i_max*) on the shared evaluation fluxes."""
    env = make_env(cfg)
    rows = []
    for flux in eval_fluxes(n_episodes, eval_seed(cfg) if seed is None else seed, env):
        theta, i_max = oracle_best_angle(flux, env.core, grid_deg)
        p1, p2, p3 = flux.phi
        rows.append({"phi1": p1, "phi2": p2, "phi3": p3, "theta_deg": theta, "i_max": i_max})
    return rows


def _benchmark_one(cfg_dict: Dict[str, Any], algo: str) -> Dict[str, Any]:
    """Train and evaluate one algorithm; module level so a process pool can pickle it."""
    cfg = RunConfig.from_dict(cfg_dict)
    try:
        _, policy, record = train_rl(cfg, algo)
    except DivergenceError as e:
        return {"algo": algo, "status": "diverged", "error": str(e), "record": e.record.to_dict() if e.record else None}
    result = evaluate(policy, make_env(cfg), cfg.get("agent", "eval_episodes"), eval_seed(cfg))
    return {
        "algo": algo,
        "status": "ok",
        "error": None,
        "record": record.to_dict(),
        "i_max": result.i_max.tolist(),
        "rewards": result.rewards.tolist(),
        "summary": result.to_dict(),
    }


SUMMARY_FIELDS = ["algo", "status", "mean", "std", "min", "q25", "median", "q75", "max", "frac_over_rated"]


def run_rl_benchmark(cfg: RunConfig, storage: Optional[Storage] = None) -> ExperimentRecord:
    """
    Train every configured algorithm, evaluate all of them plus the oracle and a
    random policy on the shared evaluation fluxes. A diverging algorithm is recorded
    and the others continue.
    """
    algos = [Algo(a).value for a in cfg.get("benchmark", "algos")]
    if not algos:
        raise ConfigError("benchmark.algos is empty")
    make_env(cfg)
    ActionGrid(cfg.get("env", "action_bins"))
    record = ExperimentRecord(name="benchmark-rl", seed=cfg.seed, config=cfg.to_dict())
    cfg_dict = cfg.to_dict()

    if cfg.get("run", "parallel") and len(algos) > 1:
        with ProcessPoolExecutor(max_workers=len(algos)) as pool:
            futures = [pool.submit(_benchmark_one, cfg_dict, a) for a in algos]
            results = [f.result() for f in futures]
    else:
        results = [_benchmark_one(cfg_dict, a) for a in algos]

    env = make_env(cfg)
    n_eval = cfg.get("agent", "eval_episodes")
    baselines = {
        "oracle": OraclePolicy(env.core, cfg.get("agent", "oracle_grid_deg")),
        "random": RandomPolicy(ActionGrid(env.n_bins), derive_seed(cfg.seed, "random")),
    }
    for name, policy in baselines.items():
        ev = evaluate(policy, env, n_eval, eval_seed(cfg))
        results.append({
            "algo": name, "status": "ok", "error": None, "record": None,
            "i_max": ev.i_max.tolist(), "rewards": ev.rewards.tolist(), "summary": ev.to_dict(),
        })

    rows, dist = [], []
    for res in results:
        if res["status"] != "ok":
            log.warning("%s diverged: %s", res["algo"], res["error"])
            rows.append({"algo": res["algo"], "status": res["status"]})
            continue
        rows.append({"algo": res["algo"], "status": "ok", **res["summary"]})
        for i, (imax, r) in enumerate(zip(res["i_max"], res["rewards"])):
            dist.append({"algo": res["algo"], "episode": i, "i_max": imax, "reward": r})
            record.log(f"{res['algo']}.i_max", imax)

    record.summary = {
        "rows": rows,
        "training": {r["algo"]: r["record"]["summary"] for r in results if r.get("record")},
        "errors": {r["algo"]: r["error"] for r in results if r["error"]},
    }
    record.finish()

    if storage is not None:
        storage.save_config(cfg)
        storage.save_record(record)
        storage.write_csv("summary.csv", rows, SUMMARY_FIELDS)
        storage.write_csv("distributions.csv", dist, ["algo", "episode", "i_max", "reward"])
        storage.path("report.md").write_text(render_rl_report(record), encoding="utf-8")
    return record


def _parse_float(path: Path, row: int, text: str) -> float:
    try:
        return float(text)
    except (TypeError, ValueError):
        raise ValidationError(f"{path}: row {row}: not a number: {text!r}") from None


def summarize_file(path: Path, column: Optional[str] = None) -> Dict[str, float]:
    """Summary of a one-column text file, or of `column` in a CSV with a header."""
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as f:
        if column is None:
            values = [
                _parse_float(path, row, line.strip())
                for row, line in enumerate(f, start=1)
                if line.strip() and not line.lstrip().startswith("#")
            ]
        else:
            reader = csv.DictReader(f)
            if reader.fieldnames is None or column not in reader.fieldnames:
                raise ValidationError(f"{path}: no column {column!r}")
            # row 1 is the header
            values = [
                _parse_float(path, row, r[column])
                for row, r in enumerate(reader, start=2)
                if r[column] != ""
            ]
    return summarize(values).to_dict()
