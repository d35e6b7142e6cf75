"""Orchestration: configuration, the three-stage training protocol
(SGP pretrain -> LSC pretrain -> joint cycle-constrained training),
checkpointing, synthesis and evaluation.

Determinism: every stochastic draw in an epoch derives from (seed, epoch), so
an interrupted run resumed from the last checkpoint retraces the original
trajectory exactly (single-threaded data path).

Training log: newline-delimited JSON records {step, loss_name, value, epoch}
written to <out_dir>/train_log.ndjson. The learning rate follows
lr0 * 2^-floor(epoch / halve_every) and is logged once per epoch.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import lsc as lsc_mod
from . import sgp as sgp_mod
from .errors import CompatibilityError
from .losses import (
    LossParts,
    LossWeights,
    adv_d_loss,
    adv_g_loss,
    cycle_error,
    cycle_loss,
    path_consistency_loss,
    recover_eps_preds,
    total_objective,
)
from .lsc import CorruptionSpec, LscConfig
from .metrics import MetricReport, evaluate_dataset, psnr
from .models import (
    ModelBundle,
    NetConfig,
    apply_chain,
    apply_frozen,
    init_models,
    transfer_corrector_weights,
)
from .phantom import (
    DatasetManifest,
    DegradationParams,
    Volume,
    load_manifest,
    make_dataset,
    write_f32,
)
from .schedule import DiffusionSchedule, build_schedule, default_beta_bounds
from .sgp import SgpConfig


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScheduleConfig:
    kind: str = "linear"
    beta_start: float | None = None  # None -> length-rescaled defaults
    beta_end: float | None = None


@dataclass(frozen=True)
class OptimizerConfig:
    lr0: float = 0.002
    halve_every: int = 10
    max_epochs: int = 120
    early_stop_patience: int = 5
    dropout: float = 0.2
    batch_slices: int = 8
    grad_clip: float = 1.0  # 0 disables; tames adversarial churn at desk scale
    disc_lr_scale: float = 0.25  # two-timescale update; D runs slower than G

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.halve_every < 1 or self.max_epochs < 1 or self.early_stop_patience < 1:
            raise ValueError("invalid optimizer schedule")
        if self.grad_clip < 0 or self.disc_lr_scale <= 0:
            raise ValueError("grad_clip must be >= 0 and disc_lr_scale > 0")


@dataclass(frozen=True)
class DataConfig:
    train_manifest: str = ""
    val_manifest: str = ""


@dataclass(frozen=True)
class DatasetConfig:
    n_samples: int = 10
    shape: tuple[int, int, int] = (16, 32, 32)
    shift_range: int = 1
    root_seed: int = 0
    n_lesions: tuple[int, int] = (0, 3)
    degradation: DegradationParams = DegradationParams()


@dataclass(frozen=True)
class WeightConfig:
    lambda1: float = 1.0
    lambda2: float = 10.0
    lambda3: float = 1.0
    rho: float = 1.0
    eta_t: tuple[float, ...] = ()  # empty -> uniform 1/(T-1)


@dataclass(frozen=True)
class Config:
    dataset: DatasetConfig = DatasetConfig()
    data: DataConfig = DataConfig()
    net: NetConfig = NetConfig()
    weights: WeightConfig = WeightConfig()
    sgp: SgpConfig = SgpConfig()
    lsc: LscConfig = LscConfig()
    schedule: ScheduleConfig = ScheduleConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    seed: int = 0
    sgp_conditioning: bool = True
    lsc_init: bool = True
    joint_sgp: bool = False
    joint_lsc: bool = False
    joint_aux_weight: float = 0.1

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "Config":
        return _build_dataclass(Config, d)

    @staticmethod
    def from_json_file(path: Path | str) -> "Config":
        return Config.from_dict(json.loads(Path(path).read_text()))

    def save(self, path: Path | str) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


_NESTED_FIELDS = {
    "dataset": DatasetConfig,
    "degradation": DegradationParams,
    "data": DataConfig,
    "net": NetConfig,
    "weights": WeightConfig,
    "sgp": SgpConfig,
    "lsc": LscConfig,
    "corruption": CorruptionSpec,
    "schedule": ScheduleConfig,
    "optimizer": OptimizerConfig,
}
_TUPLE_FIELDS = {"shape", "n_lesions", "blur_fwhm_mm", "grid", "angles", "eta_t"}


def _build_dataclass(cls, d: dict):
    kwargs = {}
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    for f in dataclasses.fields(cls):
        if f.name not in d:
            continue
        v = d[f.name]
        if f.name in _NESTED_FIELDS and isinstance(v, dict):
            v = _build_dataclass(_NESTED_FIELDS[f.name], v)
        elif f.name in _TUPLE_FIELDS and isinstance(v, list):
            v = tuple(v)
        kwargs[f.name] = v
    return cls(**kwargs)


def effective_net_config(cfg: Config) -> NetConfig:
    """Network config with the protocol's dropout applied."""
    return replace(cfg.net, dropout=cfg.optimizer.dropout)


def resolved_weights(cfg: Config) -> LossWeights:
    w = cfg.weights
    eta = w.eta_t
    if not eta:
        T = cfg.net.T_steps
        eta = tuple([1.0 / (T - 1)] * (T - 1)) if T > 1 else ()
    return LossWeights(w.lambda1, w.lambda2, w.lambda3, w.rho, eta)


def build_schedule_from_config(cfg: Config) -> DiffusionSchedule:
    T = cfg.net.T_steps
    start, end = cfg.schedule.beta_start, cfg.schedule.beta_end
    if start is None or end is None:
        d_start, d_end = default_beta_bounds(T)
        start = d_start if start is None else start
        end = d_end if end is None else end
    return build_schedule(T, start, end, cfg.schedule.kind)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(
    path: Path | str,
    bundle: ModelBundle,
    cfg: Config,
    stage: str,
    epoch: int = 0,
    step: int = 0,
    best_val_psnr: float | None = None,
    optimizer_states: dict | None = None,
    report: dict | None = None,
    extra: dict | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "stage": stage,
        "config": cfg.to_dict(),
        "net_config": dataclasses.asdict(bundle.cfg) if bundle.cfg else None,
        "schedule": build_schedule_from_config(cfg).summary(),
        "params": bundle.state_dict(),
        "optimizer_states": optimizer_states,
        "epoch": epoch,
        "step": step,
        "best_val_psnr": best_val_psnr,
        "report": report,
        "extra": extra or {},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: Path | str) -> dict:
    return torch.load(Path(path), map_location="cpu", weights_only=True)


def bundle_from_checkpoint(payload: dict) -> ModelBundle:
    net_cfg = NetConfig(**payload["net_config"])
    bundle = init_models(net_cfg, seed=0)
    bundle.load_state_dict(payload["params"])
    return bundle


def _check_compatible(payload: dict, net_cfg: NetConfig, what: str) -> None:
    saved = payload.get("net_config")
    if saved is None:
        raise CompatibilityError(f"{what} checkpoint carries no network config")
    active = dataclasses.asdict(net_cfg)
    for key, value in active.items():
        if saved.get(key) != value:
            raise CompatibilityError(
                f"{what} checkpoint incompatible: field '{key}' is "
                f"{saved.get(key)!r}, expected {value!r}"
            )


# ---------------------------------------------------------------------------
# Data staging
# ---------------------------------------------------------------------------

def run_make_data(cfg: Config, out_dir: Path | str, seed: int | None = None) -> DatasetManifest:
    ds = cfg.dataset
    root_seed = ds.root_seed if seed is None else seed
    return make_dataset(
        n_samples=ds.n_samples,
        shape=ds.shape,
        degradation=ds.degradation,
        shift_range=ds.shift_range,
        root_seed=root_seed,
        out_dir=out_dir,
        n_lesions=ds.n_lesions,
    )


def _slice_stack(pairs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All z-slices across volumes: (lf, hf, volume index per slice)."""
    lf = np.concatenate([p.lf.data for p in pairs], axis=0)
    hf = np.concatenate([p.hf.data for p in pairs], axis=0)
    vol = np.concatenate(
        [np.full(p.lf.shape[0], i) for i, p in enumerate(pairs)]
    )
    return lf.astype(np.float32), hf.astype(np.float32), vol


# ---------------------------------------------------------------------------
# Pretraining stages
# ---------------------------------------------------------------------------

def run_pretrain_sgp(
    cfg: Config, out_path: Path | str, sanity_mode: bool = False
) -> Path:
    pairs = load_manifest(cfg.data.train_manifest).load_pairs()
    bundle = init_models(effective_net_config(cfg), cfg.seed)
    report = sgp_mod.pretrain_sgp(
        pairs, bundle, cfg.sgp, seed=cfg.seed, sanity_mode=sanity_mode
    )
    return save_checkpoint(out_path, bundle, cfg, stage="sgp", report=report)


def run_pretrain_lsc(cfg: Config, out_path: Path | str) -> Path:
    pairs = load_manifest(cfg.data.train_manifest).load_pairs()
    bundle = init_models(effective_net_config(cfg), cfg.seed)
    report = lsc_mod.pretrain_lsc(pairs, bundle, cfg.lsc, seed=cfg.seed)
    return save_checkpoint(out_path, bundle, cfg, stage="lsc", report=report)


# ---------------------------------------------------------------------------
# Joint training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    best_val_psnr: float
    epochs_run: int
    stopped_early: bool
    best_ckpt: Path
    last_ckpt: Path
    log_path: Path
    history: list[dict] = field(default_factory=list)


class _NdjsonLogger:
    def __init__(self, path: Path, append: bool):
        self.path = path
        self._fh = path.open("a" if append else "w")

    def log(self, step: int, loss_name: str, value: float, epoch: int) -> None:
        self._fh.write(
            json.dumps(
                {"step": step, "loss_name": loss_name, "value": float(value), "epoch": epoch}
            )
            + "\n"
        )

    def close(self) -> None:
        self._fh.flush()
        self._fh.close()


def learning_rate_at(epoch: int, opt_cfg: OptimizerConfig) -> float:
    return opt_cfg.lr0 * 2.0 ** (-(epoch // opt_cfg.halve_every))


def _conditioning(bundle: ModelBundle, slices: torch.Tensor, enabled: bool):
    if not enabled:
        return None
    with torch.no_grad():
        return bundle.slice_encoder(slices)


def synthesize_volume(
    bundle: ModelBundle,
    lf: Volume,
    seed: int,
    sgp_conditioning: bool = True,
    batch: int = 16,
    field_strength_T: float | None = None,
) -> Volume:
    """Slice-wise chain synthesis with per-slice conditioning; deterministic
    for a fixed seed, outputs clamped to [0, 1]."""
    was_training = bundle.training
    bundle.eval()
    gen = torch.Generator().manual_seed(seed)
    out_slices = []
    data = torch.from_numpy(lf.data)
    with torch.no_grad():
        for start in range(0, data.shape[0], batch):
            x0 = data[start : start + batch].unsqueeze(1)
            cond = _conditioning(bundle, x0.squeeze(1), sgp_conditioning)
            zs = [
                torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
                for _ in range(bundle.T_steps)
            ]
            x_t = apply_chain(bundle, x0, zs, cond)[-1]
            out_slices.append(x_t.squeeze(1))
    if was_training:
        bundle.train()
    pred = torch.cat(out_slices, dim=0).clamp(0.0, 1.0).numpy().astype(np.float32)
    field = field_strength_T if field_strength_T is not None else lf.field_strength_T
    return Volume(pred, lf.spacing_mm.copy(), field)


def _validation_pass(
    bundle: ModelBundle,
    val_pairs,
    seed: int,
    sgp_conditioning: bool,
) -> tuple[float, float]:
    """Held-out mean volume PSNR of the synthesized output and mean per-slice
    cycle error."""
    psnrs = []
    cyc_errs = []
    was_training = bundle.training
    bundle.eval()
    with torch.no_grad():
        for i, pair in enumerate(val_pairs):
            pred = synthesize_volume(
                bundle, pair.lf, seed=seed + i, sgp_conditioning=sgp_conditioning
            )
            psnrs.append(psnr(pred.data, pair.hf.data))
            x0 = torch.from_numpy(pair.lf.data).unsqueeze(1)
            x_t = torch.from_numpy(pred.data).unsqueeze(1)
            x0_rec = bundle.reverse(x_t)
            cyc_errs.append(float(cycle_error(x0, x0_rec).mean()))
    if was_training:
        bundle.train()
    return float(np.mean(psnrs)), float(np.mean(cyc_errs))


def run_train(
    cfg: Config,
    sgp_ckpt: Path | str | None,
    lsc_ckpt: Path | str | None,
    out_dir: Path | str,
    from_scratch: bool = False,
    resume_from: Path | str | None = None,
    val_metric_fn: Callable[[int, ModelBundle], float] | None = None,
) -> TrainResult:
    """Joint cycle-constrained training per the fixed protocol: alternating
    discriminator/generator steps, lr halved every ``halve_every`` epochs,
    early stopping on validation PSNR.

    ``val_metric_fn(epoch, bundle)`` overrides the validation metric (used by
    protocol tests to exercise the early-stopping machinery with a stub).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    net_cfg = effective_net_config(cfg)
    opt_cfg = cfg.optimizer
    weights = resolved_weights(cfg)
    sched = build_schedule_from_config(cfg)
    T = net_cfg.T_steps

    bundle = init_models(net_cfg, cfg.seed)
    if not from_scratch:
        if sgp_ckpt is None or lsc_ckpt is None:
            raise ValueError(
                "joint training requires both stage checkpoints; pass "
                "from_scratch=True to skip the pretraining stages"
            )
        sgp_payload = load_checkpoint(sgp_ckpt)
        lsc_payload = load_checkpoint(lsc_ckpt)
        if sgp_payload.get("stage") != "sgp":
            raise CompatibilityError("sgp checkpoint has the wrong stage tag")
        if lsc_payload.get("stage") != "lsc":
            raise CompatibilityError("lsc checkpoint has the wrong stage tag")
        _check_compatible(sgp_payload, net_cfg, "sgp")
        _check_compatible(lsc_payload, net_cfg, "lsc")
        donor = bundle_from_checkpoint(sgp_payload)
        bundle.slice_encoder.load_state_dict(donor.slice_encoder.state_dict())
        donor = bundle_from_checkpoint(lsc_payload)
        bundle.corrector.load_state_dict(donor.corrector.state_dict())
        bundle.patch_disc.load_state_dict(donor.patch_disc.state_dict())
        if cfg.lsc_init:
            transfer_corrector_weights(bundle)

    train_pairs = load_manifest(cfg.data.train_manifest).load_pairs()
    val_pairs = load_manifest(cfg.data.val_manifest).load_pairs()
    lf_np, hf_np, _ = _slice_stack(train_pairs)
    lf_all = torch.from_numpy(lf_np)
    hf_all = torch.from_numpy(hf_np)
    n_slices = lf_all.shape[0]

    gen_params = [p for g in bundle.chain for p in g.parameters()]
    gen_params += list(bundle.reverse.parameters())
    if cfg.joint_sgp:
        gen_params += list(bundle.slice_encoder.parameters())
    if cfg.joint_lsc:
        gen_params += list(bundle.corrector.parameters())
    opt_g = torch.optim.Adam(gen_params, lr=opt_cfg.lr0)
    opt_d = torch.optim.Adam(bundle.disc.parameters(), lr=opt_cfg.lr0)
    opt_pd = (
        torch.optim.Adam(bundle.patch_disc.parameters(), lr=opt_cfg.lr0)
        if cfg.joint_lsc
        else None
    )

    start_epoch = 0
    global_step = 0
    best_psnr = -math.inf
    bad_epochs = 0
    history: list[dict] = []
    if resume_from is not None:
        payload = load_checkpoint(resume_from)
        _check_compatible(payload, net_cfg, "resume")
        bundle.load_state_dict(payload["params"])
        states = payload["optimizer_states"] or {}
        if "gen" in states:
            opt_g.load_state_dict(states["gen"])
        if "disc" in states:
            opt_d.load_state_dict(states["disc"])
        if opt_pd is not None and "patch_disc" in states:
            opt_pd.load_state_dict(states["patch_disc"])
        start_epoch = payload["epoch"] + 1
        global_step = payload["step"]
        best_psnr = payload["best_val_psnr"] if payload["best_val_psnr"] is not None else -math.inf
        bad_epochs = payload["extra"].get("bad_epochs", 0)
        history = payload["extra"].get("history", [])

    log_path = out_dir / "train_log.ndjson"
    logger = _NdjsonLogger(log_path, append=resume_from is not None)
    best_path = out_dir / "best.ckpt"
    last_path = out_dir / "last.ckpt"
    bundle.train()

    stopped_early = False
    epochs_run = start_epoch
    try:
        for epoch in range(start_epoch, opt_cfg.max_epochs):
            lr = learning_rate_at(epoch, opt_cfg)
            for group in opt_g.param_groups:
                group["lr"] = lr
            for opt in filter(None, (opt_d, opt_pd)):
                for group in opt.param_groups:
                    group["lr"] = lr * opt_cfg.disc_lr_scale
            logger.log(global_step, "lr", lr, epoch)

            torch.manual_seed(cfg.seed * 1_000_003 + epoch)
            order_rng = np.random.default_rng(
                np.random.SeedSequence([cfg.seed, 11, epoch])
            )
            order = order_rng.permutation(n_slices)

            for start in range(0, n_slices, opt_cfg.batch_slices):
                idx = order[start : start + opt_cfg.batch_slices]
                x0 = lf_all[idx].unsqueeze(1)
                y = hf_all[idx].unsqueeze(1)
                cond = _conditioning(bundle, x0.squeeze(1), cfg.sgp_conditioning)

                zs = [torch.randn_like(x0) for _ in range(T)]
                chain_states = apply_chain(bundle, x0, zs, cond)
                x_t = chain_states[-1]

                d_loss = adv_d_loss(bundle.disc(y), bundle.disc(x_t.detach()))
                opt_d.zero_grad()
                d_loss.backward()
                if opt_cfg.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(bundle.disc.parameters(), opt_cfg.grad_clip)
                opt_d.step()

                g_adv = adv_g_loss(apply_frozen(bundle.disc, x_t))
                x0_rec = bundle.reverse(x_t)
                y_lf = bundle.reverse(y)
                cond_b = _conditioning(
                    bundle, y_lf.squeeze(1).detach(), cfg.sgp_conditioning
                )
                zs_b = [torch.randn_like(y) for _ in range(T)]
                y_rec = apply_chain(bundle, y_lf, zs_b, cond_b)[-1]
                cyc = cycle_loss(x0, x0_rec, y, y_rec, weights.rho)
                eps_preds = recover_eps_preds(chain_states, sched)
                path = path_consistency_loss(chain_states, eps_preds, sched, weights.eta_t)

                parts = LossParts(adv_g=g_adv, adv_d=d_loss.detach(), cyc=cyc, path=path)
                gen_loss, _ = total_objective(parts, weights)

                if cfg.joint_sgp:
                    z_lf = bundle.slice_encoder(x0.squeeze(1))
                    z_hf = bundle.slice_encoder(y.squeeze(1))
                    if z_lf.shape[0] >= 2:
                        aux = sgp_mod.info_nce_loss(
                            z_lf, z_hf, np.arange(z_lf.shape[0]), cfg.sgp.tau
                        )
                        gen_loss = gen_loss + cfg.joint_aux_weight * aux
                if cfg.joint_lsc:
                    y_np = y.squeeze(1).numpy()
                    y_lsc_np = lsc_mod._corrupt_batch(
                        y_np, cfg.lsc.corruption, epoch, start
                    )
                    y_lsc = torch.from_numpy(y_lsc_np).unsqueeze(1)
                    gen_term, disc_term = lsc_mod.lsc_adversarial(
                        bundle.corrector, bundle.patch_disc, y, y_lsc
                    )
                    opt_pd.zero_grad()
                    (-disc_term).backward()
                    opt_pd.step()
                    recon = lsc_mod.lsc_recon_loss(
                        y, bundle.corrector(y_lsc), cfg.lsc.alpha
                    )
                    gen_loss = gen_loss + cfg.joint_aux_weight * (
                        recon + cfg.lsc.mu * gen_term
                    )

                opt_g.zero_grad()
                gen_loss.backward()
                if opt_cfg.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(gen_params, opt_cfg.grad_clip)
                opt_g.step()

                for name, value in (
                    ("adv_d", d_loss),
                    ("adv_g", g_adv),
                    ("cyc", cyc),
                    ("path", path),
                    ("gen_total", gen_loss),
                ):
                    logger.log(global_step, name, float(value.detach()), epoch)
                global_step += 1

            if val_metric_fn is not None:
                val_psnr = float(val_metric_fn(epoch, bundle))
                val_cyc = float("nan")
            else:
                val_psnr, val_cyc = _validation_pass(
                    bundle, val_pairs, seed=cfg.seed + 7_000, sgp_conditioning=cfg.sgp_conditioning
                )
            logger.log(global_step, "val_psnr", val_psnr, epoch)
            if math.isfinite(val_cyc):
                logger.log(global_step, "val_cycle_error", val_cyc, epoch)
            history.append(
                {"epoch": epoch, "lr": lr, "val_psnr": val_psnr, "val_cycle_error": val_cyc}
            )
            epochs_run = epoch + 1

            improved = val_psnr > best_psnr
            if improved:
                best_psnr = val_psnr
                bad_epochs = 0
                save_checkpoint(
                    best_path,
                    bundle,
                    cfg,
                    stage="joint",
                    epoch=epoch,
                    step=global_step,
                    best_val_psnr=best_psnr,
                    extra={"history": history},
                )
            else:
                bad_epochs += 1

            save_checkpoint(
                last_path,
                bundle,
                cfg,
                stage="joint",
                epoch=epoch,
                step=global_step,
                best_val_psnr=best_psnr,
                optimizer_states={
                    "gen": opt_g.state_dict(),
                    "disc": opt_d.state_dict(),
                    **({"patch_disc": opt_pd.state_dict()} if opt_pd else {}),
                },
                extra={"bad_epochs": bad_epochs, "history": history},
            )

            if bad_epochs >= opt_cfg.early_stop_patience:
                stopped_early = True
                break
    finally:
        logger.close()

    result = TrainResult(
        best_val_psnr=best_psnr,
        epochs_run=epochs_run,
        stopped_early=stopped_early,
        best_ckpt=best_path,
        last_ckpt=last_path,
        log_path=log_path,
        history=history,
    )
    (out_dir / "train_result.json").write_text(
        json.dumps(
            {
                "best_val_psnr": result.best_val_psnr,
                "epochs_run": result.epochs_run,
                "stopped_early": result.stopped_early,
                "history": result.history,
            },
            indent=2,
        )
        + "\n"
    )
    return result


# ---------------------------------------------------------------------------
# Synthesis and evaluation
# ---------------------------------------------------------------------------

def run_synthesize(
    ckpt_path: Path | str,
    manifest: DatasetManifest | Path | str,
    out_dir: Path | str,
    seed: int = 0,
) -> list[Path]:
    """Synthesize predictions for every manifest sample; writes
    ``<id>_pred.f32`` volumes (plus sidecars) in the dataset file format."""
    payload = load_checkpoint(ckpt_path)
    bundle = bundle_from_checkpoint(payload)
    bundle.eval()
    cfg = Config.from_dict(payload["config"])
    man = manifest if isinstance(manifest, DatasetManifest) else load_manifest(manifest)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    written = []
    for i, entry in enumerate(man.samples):
        pair = man.load_pair(entry["sample_id"])
        pred = synthesize_volume(
            bundle,
            pair.lf,
            seed=seed + i,
            sgp_conditioning=cfg.sgp_conditioning,
            field_strength_T=entry["field_strength_T"],
        )
        f32_path = out_dir / f"{entry['sample_id']}_pred.f32"
        write_f32(f32_path, pred.data)
        sidecar = {
            "sample_id": entry["sample_id"],
            "shape": list(pred.data.shape),
            "spacing_mm": [float(v) for v in pred.spacing_mm],
            "field_strength_T": entry["field_strength_T"],
            "source_checkpoint": str(ckpt_path),
            "seed": seed + i,
        }
        (out_dir / f"{entry['sample_id']}_pred.json").write_text(
            json.dumps(sidecar, indent=2, sort_keys=True) + "\n"
        )
        written.append(f32_path)
    return written


def run_evaluate(
    pred_dir: Path | str,
    manifest: DatasetManifest | Path | str,
    out_dir: Path | str | None = None,
) -> MetricReport:
    return evaluate_dataset(pred_dir, manifest, out_dir)
