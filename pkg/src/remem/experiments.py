"""Composable experiment steps shared by the CLI and the directional suite.

A teacher is a small ViT pretrained on an upstream shapes set and then
fine-tuned on the downstream split, optionally with reweighting, pruning
or SAM switched on. Students are MLPs distilled under the grid protocol.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import data as D
from .checkpoint import load_checkpoint
from .config import RunConfig
from .distill import (EvalProtocol, KdConfig, ProtocolResult, StudentModel, TeacherVariant, run_protocol,
                      train_student)
from .errors import ParameterError
from .finetune import FinetuneConfig, FinetuneResult, VitTeacher, evaluate, finetune
from .infometer import InfoPlanePoint, mi_proxy
from .nn import ReMemConfig, VitConfig, VitModel
from .seeding import derive_seed

ABLATE_HEADER = ("variant", "alpha_mlp", "sam_rho", "teacher_acc", "mi_proxy", "student_acc")
PRUNE_HEADER = ("block_kind", "k") + ("tag", "teacher_err", "mi_proxy", "baseline_loss", "d_embed", "seed")


def vit_config(cfg: RunConfig) -> VitConfig:
    v = cfg.vit
    return VitConfig(image_size=cfg.dataset.image_size, patch_size=v.patch_size, channels=v.channels,
                     d_embed=v.d_embed, d_mlp=v.d_mlp, n_heads=v.n_heads, n_layers=v.n_layers,
                     n_classes=cfg.dataset.n_classes)


def remem_config(cfg: RunConfig, **changes) -> ReMemConfig:
    r = cfg.remem
    base = ReMemConfig(r.alpha_mlp, r.alpha_attn, r.prune_mlp_top_k, r.prune_attn_top_k)
    return replace(base, **changes)


def distill_remem(cfg: RunConfig, remem: ReMemConfig) -> ReMemConfig:
    """The reweighting the teacher uses while producing distillation targets."""
    if cfg.remem.apply_at_distill:
        return remem
    return replace(remem, alpha_mlp=1.0, alpha_attn=1.0)


def downstream(cfg: RunConfig) -> tuple[D.Dataset, D.Dataset]:
    d = cfg.dataset
    ds = D.preset(d.preset, n_classes=d.n_classes, image_size=d.image_size,
                  samples_per_class=d.samples_per_class, noise=d.noise,
                  seed=derive_seed(cfg.seed, "downstream-data"))
    return D.split(ds, tuple(d.split), seed=derive_seed(cfg.seed, "downstream-split"))


def mi_probe(cfg: RunConfig, test: D.Dataset) -> D.Dataset:
    """Images the MI decoder is trained and scored on. Never seen by the teacher."""
    d, n = cfg.dataset, cfg.mi.probe_samples_per_class
    if n <= 0:
        return test
    return D.preset(d.preset, n_classes=d.n_classes, image_size=d.image_size, samples_per_class=n,
                    noise=d.noise, seed=derive_seed(cfg.seed, "mi-probe"))


def upstream(cfg: RunConfig) -> D.Dataset:
    d = cfg.dataset
    return D.preset(d.upstream_preset, n_classes=d.n_classes, image_size=d.image_size,
                    samples_per_class=d.upstream_samples_per_class, noise=d.upstream_noise,
                    seed=derive_seed(cfg.seed, "upstream-data"))


def pretrained_teacher(cfg: RunConfig) -> VitModel:
    """Load ``vit.init_checkpoint`` if given, otherwise pretrain on the upstream set."""
    vc = vit_config(cfg)
    if cfg.vit.init_checkpoint:
        return load_checkpoint(cfg.vit.init_checkpoint, vc)
    model = VitModel(vc, seed=derive_seed(cfg.seed, "vit-init"))
    s = cfg.schedule
    if s.pretrain_steps > 0:
        ft = FinetuneConfig(steps=s.pretrain_steps, lr=cfg.optimizer.pretrain_lr,
                            warmup_steps=s.pretrain_warmup_steps, momentum=cfg.optimizer.momentum,
                            batch_size=64)
        finetune(model, None, upstream(cfg), ft, derive_seed(cfg.seed, "pretrain"))
    return model


def overtrained_teacher(ctx: Context, steps: int) -> VitModel:
    """A ViT trained from scratch on the downstream train split far past fitting it."""
    cfg = ctx.cfg
    model = VitModel(vit_config(cfg), seed=derive_seed(cfg.seed, "overtrain-init"))
    ft = FinetuneConfig(steps=steps, lr=cfg.optimizer.pretrain_lr, warmup_steps=cfg.schedule.warmup_steps,
                        momentum=cfg.optimizer.momentum, batch_size=cfg.optimizer.batch_size)
    return finetune(model, None, ctx.train, ft, derive_seed(cfg.seed, "overtrain")).model


def kd_config(cfg: RunConfig, **changes) -> KdConfig:
    k = cfg.distill
    kd = KdConfig(algorithm=k.algorithm, lam=k.lam, temperature=k.temperature, dist_beta=k.dist_beta,
                  dist_gamma=k.dist_gamma, mixup_alpha=k.mixup_alpha, steps=k.steps,
                  batch_size=k.batch_size, lr=k.lr, warmup_steps=k.warmup_steps, momentum=k.momentum,
                  weight_decay=k.weight_decay)
    return replace(kd, **changes) if changes else kd


def protocol(cfg: RunConfig) -> EvalProtocol:
    p = cfg.protocol
    return EvalProtocol(tuple(p.ckpt_steps), tuple(p.teacher_lrs), tuple(p.student_lrs),
                        tuple(p.lams), tuple(p.temperatures))


@dataclass
class Context:
    cfg: RunConfig
    train: D.Dataset
    test: D.Dataset
    base: VitModel
    probe: D.Dataset

    @property
    def seed(self) -> int:
        return self.cfg.seed


def prepare(cfg: RunConfig, base: VitModel | None = None) -> Context:
    train, test = downstream(cfg)
    base = base if base is not None else pretrained_teacher(cfg)
    return Context(cfg, train, test, base, mi_probe(cfg, test))


def finetune_teacher(ctx: Context, remem: ReMemConfig | None = None, rho: float | None = None,
                     ckpt_steps=None, lr: float | None = None, steps: int | None = None) -> FinetuneResult:
    """Fine-tune a copy of the base model. Every variant sees the same batch order."""
    cfg = ctx.cfg
    remem = remem if remem is not None else remem_config(cfg)
    remem.validate(cfg.vit.n_layers)
    o, s = cfg.optimizer, cfg.schedule
    ft = FinetuneConfig(steps=steps if steps is not None else s.finetune_steps,
                        lr=lr if lr is not None else o.lr, warmup_steps=s.warmup_steps,
                        momentum=o.momentum, weight_decay=o.weight_decay, batch_size=o.batch_size,
                        rho=o.sam_rho if rho is None else rho,
                        ckpt_steps=tuple(ckpt_steps if ckpt_steps is not None else cfg.protocol.ckpt_steps))
    return finetune(ctx.base.copy(), remem, ctx.train, ft, derive_seed(cfg.seed, "finetune"))


def teacher_point(ctx: Context, model: VitModel, remem: ReMemConfig | None, tag: str = "") -> InfoPlanePoint:
    """Teacher error on the test split, MI proxy on the probe set."""
    seed = derive_seed(ctx.seed, "mi")
    est = mi_proxy(model, remem, ctx.probe, ctx.cfg.mi.updates, seed)
    return InfoPlanePoint(tag, 1.0 - evaluate(model, remem, ctx.test), est.mi_proxy, est.baseline_loss,
                          est.d_embed, seed)


def at_checkpoint(model: VitModel, state: dict) -> VitModel:
    m = model.copy()
    m.load_state_dict(state)
    return m


def distill_variant(ctx: Context, remem: ReMemConfig | None = None, rho: float | None = None,
                    workers: int = 1, kd: KdConfig | None = None) -> tuple[ProtocolResult, dict]:
    """Fine-tune one teacher per teacher lr, then run the student grid over its checkpoints.

    Returns the protocol result and the fine-tuned teachers keyed by lr.
    """
    cfg = ctx.cfg
    remem = remem if remem is not None else remem_config(cfg)
    proto = protocol(cfg)
    teachers, finals = {}, {}
    for t_lr in proto.teacher_lrs:
        res = finetune_teacher(ctx, remem, rho, proto.ckpt_steps, lr=t_lr)
        finals[t_lr] = res.model
        for step in proto.ckpt_steps:
            m = at_checkpoint(res.model, res.checkpoints[step])
            served = distill_remem(cfg, remem)
            teachers[(step, t_lr)] = TeacherVariant(VitTeacher(m, served), evaluate(m, served, ctx.test))
    out = run_protocol(proto, teachers, ctx.train, ctx.test, kd or kd_config(cfg),
                       derive_seed(ctx.seed, "student"), cfg.distill.d_hidden, workers)
    return out, finals


def prune_sweep(ctx: Context, ks=None, kinds=("mlp", "attn")) -> list[dict]:
    """One info-plane row per (block kind, k): prune the top k blocks, fine-tune, measure."""
    n = ctx.cfg.vit.n_layers
    ks = list(range(n + 1)) if ks is None else list(ks)
    rows, cache = [], {}
    for kind in kinds:
        for k in ks:
            if k < 0 or k > n:
                raise ParameterError(f"prune count {k} outside 0..{n}")
            remem = remem_config(ctx.cfg, **{f"prune_{kind}_top_k": k})
            key = (remem.prune_mlp_top_k, remem.prune_attn_top_k)
            if key not in cache:
                res = finetune_teacher(ctx, remem, ckpt_steps=())
                cache[key] = teacher_point(ctx, res.model, remem, f"{kind}-{k}")
            pt = cache[key]
            rows.append({"block_kind": kind, "k": k, "tag": f"{kind}-{k}", "teacher_err": pt.teacher_err,
                         "mi_proxy": pt.mi_proxy, "baseline_loss": pt.baseline_loss,
                         "d_embed": pt.d_embed, "seed": pt.seed})
    return rows


def ablation_variants(cfg: RunConfig) -> list[tuple[str, float, float]]:
    """(name, alpha_mlp, rho) for baseline, reweight-only, SAM-only and the combination."""
    alpha, rho = cfg.protocol.alphas[0], cfg.protocol.rhos[0]
    return [("baseline", 1.0, 0.0), ("reweight", alpha, 0.0), ("sam", 1.0, rho), ("remem", alpha, rho)]


def ablate(ctx: Context, workers: int = 1, variants=None) -> list[dict]:
    rows = []
    for name, alpha, rho in variants or ablation_variants(ctx.cfg):
        remem = remem_config(ctx.cfg, alpha_mlp=alpha)
        out, finals = distill_variant(ctx, remem, rho, workers)
        final = finals[ctx.cfg.protocol.teacher_lrs[0]]
        pt = teacher_point(ctx, final, remem, name)
        rows.append({"variant": name, "alpha_mlp": alpha, "sam_rho": rho,
                     "teacher_acc": 1.0 - pt.teacher_err, "mi_proxy": pt.mi_proxy,
                     "student_acc": out.best["student_acc"] if out.best else float("nan")})
    return rows


def scratch_student_acc(ctx: Context) -> float:
    """Reference: the grid's student trained on labels alone."""
    cfg = ctx.cfg
    seed = derive_seed(ctx.seed, "student")
    s = StudentModel(int(np.prod(ctx.train.image_shape)), cfg.dataset.n_classes, cfg.distill.d_hidden,
                     seed=derive_seed(seed, "student-init"))
    return train_student(s, None, ctx.train, ctx.test, kd_config(cfg, lam=1.0), seed).best_acc
