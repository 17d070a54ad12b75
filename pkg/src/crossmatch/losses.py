"""Supervised, image-perturbation and self-distillation losses, and their weighted total."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F

from .errors import ConfigError

TKD_STUDENTS = ("p_w_w", "p_s_w", "p_w_s", "p_s_s")
DKD_TERMS = ("w", "s")
IP_STREAMS = ("s1", "s2")
H_KINDS = ("dice", "ce", "kl")
SUP_KINDS = ("mix", "ce", "dice")


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.85
    eta: float = 0.3
    h_kind: str = "dice"
    temperature: float = 1.0
    tkd_students: tuple = TKD_STUDENTS
    dkd_terms: tuple = DKD_TERMS
    ip_streams: tuple = IP_STREAMS
    dice_smooth: float = 1e-5
    sup_kind: str = "mix"

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError(f"eta must be in [0, 1], got {self.eta}")
        if self.tau < 0:
            raise ConfigError(f"tau must be >= 0, got {self.tau}")
        if self.h_kind not in H_KINDS:
            raise ConfigError(f"unknown distillation criterion {self.h_kind!r}")
        if self.sup_kind not in SUP_KINDS:
            raise ConfigError(f"unknown supervised loss {self.sup_kind!r}")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if self.h_kind != "kl" and self.temperature != 1.0:
            raise ConfigError("temperature only applies to the kl criterion")
        for name, allowed in (("tkd_students", TKD_STUDENTS), ("dkd_terms", DKD_TERMS), ("ip_streams", IP_STREAMS)):
            values = getattr(self, name)
            bad = set(values) - set(allowed)
            if bad:
                raise ConfigError(f"{name} has unknown entries {sorted(bad)}")
            # canonical order, duplicates dropped
            object.__setattr__(self, name, tuple(v for v in allowed if v in values))

    def to_dict(self):
        d = asdict(self)
        for k in ("tkd_students", "dkd_terms", "ip_streams"):
            d[k] = list(d[k])
        return d


@dataclass
class LossReport:
    sup: float = 0.0
    ip: float = 0.0
    tkd: float = 0.0
    dkd: float = 0.0
    total: float = 0.0
    eta: float = 0.0
    mask_coverage: dict = field(default_factory=dict)

    def row(self):
        row = {k: getattr(self, k) for k in ("sup", "ip", "tkd", "dkd", "total")}
        row.update({f"coverage_{k}": v for k, v in sorted(self.mask_coverage.items())})
        return row

    def affine_residual(self):
        return abs(self.total - (self.sup + self.ip + (1 - self.eta) * self.tkd + self.eta * self.dkd))


def softmax_probs(logits, T=1.0):
    if T <= 0:
        raise ConfigError("temperature must be > 0")
    return torch.softmax(logits / T, dim=1)


def confidence_mask(p_ref, tau):
    """1 where the max class probability reaches ``tau``, per pixel: [B, H, W]."""
    return (p_ref.max(dim=1).values >= tau).to(p_ref.dtype)


def _zero_like(t):
    # exact zero that stays attached to the graph
    return (t * 0).sum()


def soft_dice_loss(probs, target_onehot, mask=None, smooth=1e-5):
    """1 - mean over classes of masked soft Dice, sums taken over batch and pixels."""
    if mask is None:
        mask = torch.ones_like(probs[:, 0])
    if not bool(mask.any()):
        return _zero_like(probs)
    m = mask.unsqueeze(1)
    dims = (0,) + tuple(range(2, probs.dim()))
    inter = (probs * target_onehot * m).sum(dims)
    denom = (probs * m).sum(dims) + (target_onehot * m).sum(dims)
    return 1.0 - ((2.0 * inter + smooth) / (denom + smooth)).mean()


def masked_ce_loss(pred, target, mask=None, from_logits=True):
    """Mean of -log p[target] over masked pixels. ``pred`` is logits or probabilities."""
    if mask is None:
        mask = torch.ones_like(target, dtype=pred.dtype)
    if not bool(mask.any()):
        return _zero_like(pred)
    logp = F.log_softmax(pred, dim=1) if from_logits else torch.log(pred.clamp_min(1e-12))
    nll = -logp.gather(1, target.long().unsqueeze(1)).squeeze(1)
    return (nll * mask).sum() / mask.sum()


def kd_kl_loss(logits_t, logits_s, T=1.0, mask=None):
    """Symmetric KL, 0.5 KL(t||s) + 0.5 KL(s||t), on T-scaled softmaxes, averaged over masked pixels."""
    if mask is None:
        mask = torch.ones_like(logits_t[:, 0])
    if not bool(mask.any()):
        return _zero_like(logits_s) + _zero_like(logits_t)
    lt = F.log_softmax(logits_t / T, dim=1)
    ls = F.log_softmax(logits_s / T, dim=1)
    pt, ps = lt.exp(), ls.exp()
    per_pixel = 0.5 * (pt * (lt - ls)).sum(1) + 0.5 * (ps * (ls - lt)).sum(1)
    return (per_pixel * mask).sum() / mask.sum()


def one_hot(labels, num_classes, dtype):
    return F.one_hot(labels.long(), num_classes).movedim(-1, 1).to(dtype)


def distill(teacher_logits, student_logits, mask, cfg: LossConfig, kind=None):
    """Discrepancy between a gradient-stopped teacher and a student, both given as logits."""
    kind = kind or cfg.h_kind
    teacher = teacher_logits.detach()
    if kind == "dice":
        hard = one_hot(teacher.argmax(1), teacher.shape[1], student_logits.dtype)
        return soft_dice_loss(softmax_probs(student_logits), hard, mask, cfg.dice_smooth)
    if kind == "ce":
        return masked_ce_loss(student_logits, teacher.argmax(1), mask)
    if kind == "kl":
        return kd_kl_loss(teacher, student_logits, cfg.temperature, mask)
    raise ConfigError(f"unknown distillation criterion {kind!r}")


# short alias for the distillation criterion
H = distill


def supervised_loss(logits, gt, kind="mix", smooth=1e-5):
    ce = masked_ce_loss(logits, gt)
    dice = soft_dice_loss(softmax_probs(logits), one_hot(gt, logits.shape[1], logits.dtype), None, smooth)
    if kind == "ce":
        return ce
    if kind == "dice":
        return dice
    return 0.5 * ce + 0.5 * dice


def mix_teacher(teacher, mix):
    """Paste the partner's teacher map inside each sample's CutMix box."""
    if mix is None:
        return teacher
    box, partner = mix
    return torch.where(box.unsqueeze(1), teacher[partner], teacher)


def _mean(terms, ref):
    return sum(terms) / len(terms) if terms else _zero_like(ref)


def tkd_loss(streams, cfg: LossConfig, coverage=None):
    """Teacher p_w_n supervising the feature-perturbed students, averaged over enabled students."""
    teacher_w = streams.p_w_n.detach()
    teachers = {"w": teacher_w, "s": mix_teacher(teacher_w, streams.mix_s2)}
    terms = []
    for name in cfg.tkd_students:
        t = teachers[name[2]]
        mask = confidence_mask(softmax_probs(t), cfg.tau)
        if coverage is not None:
            coverage[f"tkd_{name}"] = float(mask.mean())
        terms.append(distill(t, streams[name], mask, cfg))
    return _mean(terms, streams.p_w_n)


def dkd_loss(streams, cfg: LossConfig, coverage=None):
    """p_w_j supervising p_s_j for each enabled decoder j."""
    terms = []
    for j in cfg.dkd_terms:
        t = mix_teacher(streams[f"p_w_{j}"].detach(), streams.mix_s2)
        mask = confidence_mask(softmax_probs(t), cfg.tau)
        if coverage is not None:
            coverage[f"dkd_{j}"] = float(mask.mean())
        terms.append(distill(t, streams[f"p_s_{j}"], mask, cfg))
    return _mean(terms, streams.p_w_n)


def ip_loss(streams, cfg: LossConfig, coverage=None):
    """Hardened, confidence-masked p_w_n supervising the strongly augmented views with Dice."""
    teacher_w = streams.p_w_n.detach()
    terms = []
    for name in cfg.ip_streams:
        t = mix_teacher(teacher_w, getattr(streams, f"mix_{name}"))
        mask = confidence_mask(softmax_probs(t), cfg.tau)
        if coverage is not None:
            coverage[f"ip_{name}"] = float(mask.mean())
        terms.append(distill(t, streams[f"p_{name}"], mask, cfg, kind="dice"))
    return _mean(terms, streams.p_w_n)


def _item(t):
    return float(t.detach()) if torch.is_tensor(t) else float(t)


def total_loss(sup, ip, tkd, dkd, eta, coverage=None):
    total = sup + ip + (1.0 - eta) * tkd + eta * dkd
    report = LossReport(
        sup=_item(sup), ip=_item(ip), tkd=_item(tkd), dkd=_item(dkd), total=_item(total),
        eta=float(eta), mask_coverage=dict(coverage or {}),
    )
    return total, report
