"""Training objectives.

Pixel level: counting, entropic optimal transport and total variation terms
on labeled maps. Region level: ranking and consistency over a nested crop
pyramid on unlabeled maps. Image level: token-count regularization on both.

Map tensors are (B, K, h, w) with K decoder scales; a single (K, h, w) stack is
treated as a batch of one. Per-image losses are averaged over the batch.
"""

from __future__ import annotations

import contextlib
import logging
import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F

log = logging.getLogger(__name__)

CROP_SCALE = 0.75
KL_FLOOR = 1e-8
MASS_EPS = 1e-12
DENSE_OT_MAX_BINS = 64  # the full unrolled graph costs O(iters * bins^2) memory
# exp() of arguments whose result is subnormal hits a slow path on CPU; terms
# this far below the row maximum cannot change the sum anyway
EXP_FLOOR = {torch.float64: -600.0, torch.float32: -80.0}


@dataclass
class LossWeights:
    alpha_count: float = 1.0
    alpha_ot: float = 0.1
    alpha_tv: float = 0.01
    lam: float = 1.0
    ot_reg: float = 10.0
    ot_iters: int = 100
    ot_tol: float = 1e-6
    ot_unroll: int = 10  # solver updates tracked by autograd on large grids
    crops: int = 4

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"{k} must be non-negative, got {v}")


@dataclass
class LossSwitches:
    consistency: bool = True  # LTC
    ranking: bool = True  # LTR
    global_count: bool = True  # GTC
    l2_pixel: bool = False  # replace the DM terms by squared error
    divergence: str = "kl"  # or "js"
    single_crop_consistency: bool = False  # STC
    single_scale_ranking: bool = False  # STR
    detach_targets: bool = True


@dataclass
class LossReport:
    L_c: float = 0.0
    L_ot: float = 0.0
    L_tv: float = 0.0
    L_dm: float = 0.0
    L_rank: float = 0.0
    L_consis: float = 0.0
    L_ts: float = 0.0
    L_tu: float = 0.0
    L_s: float = 0.0
    L_u: float = 0.0
    L_total: float = 0.0
    flags: list[str] = field(default_factory=list)

    FIELDS = ("L_c", "L_ot", "L_tv", "L_dm", "L_rank", "L_consis", "L_ts", "L_tu",
              "L_s", "L_u", "L_total")

    def row(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in self.FIELDS}


def _batched(preds: torch.Tensor) -> torch.Tensor:
    if preds.dim() == 3:
        return preds.unsqueeze(0)
    if preds.dim() != 4:
        raise ValueError(f"expected (B, K, h, w) predictions, got shape {tuple(preds.shape)}")
    return preds


def _batched_gt(gt: torch.Tensor) -> torch.Tensor:
    return gt.unsqueeze(0) if gt.dim() == 2 else gt


def _check_same_res(preds: torch.Tensor, gt: torch.Tensor) -> None:
    if preds.shape[-2:] != gt.shape[-2:] or preds.shape[0] != gt.shape[0]:
        raise ValueError(f"prediction {tuple(preds.shape)} and ground truth {tuple(gt.shape)} "
                         "do not match")


# -- pixel level --------------------------------------------------------------

def counting_loss(preds: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    preds, gt = _batched(preds), _batched_gt(gt)
    _check_same_res(preds, gt)
    diff = preds.sum(dim=(2, 3)) - gt.sum(dim=(1, 2))[:, None]
    return diff.abs().sum(dim=1).mean()


def _normalized(preds: torch.Tensor, gt: torch.Tensor, flags: list[str] | None, name: str):
    """Normalized (B, K, n) predictions, (B, n) targets and a (B, K) validity mask."""
    B, K = preds.shape[:2]
    p = preds.reshape(B, K, -1)
    g = gt.reshape(B, -1)
    pm, gm = p.sum(-1), g.sum(-1)
    valid = (pm > MASS_EPS) & (gm > MASS_EPS)[:, None]
    if flags is not None and not bool(valid.all()):
        flags.append(f"{name}: skipped {int((~valid).sum())} zero-mass term(s)")
    a = p / torch.where(valid, pm, torch.ones_like(pm))[..., None]
    b = g / torch.where(gm > MASS_EPS, gm, torch.ones_like(gm))[:, None]
    return a, b, valid


def tv_loss(preds: torch.Tensor, gt: torch.Tensor, flags: list[str] | None = None) -> torch.Tensor:
    preds, gt = _batched(preds), _batched_gt(gt)
    _check_same_res(preds, gt)
    a, b, valid = _normalized(preds, gt, flags, "tv")
    tv = 0.5 * (a - b[:, None]).abs().sum(-1)
    return (tv * valid).sum(dim=1).mean()


def _sq_dist(n: int, dtype, device) -> torch.Tensor:
    r = torch.arange(n, dtype=dtype, device=device)
    return (r[:, None] - r[None, :]) ** 2


def _sep_apply(ky: torch.Tensor, kx: torch.Tensor, logv: torch.Tensor) -> torch.Tensor:
    """log(ky @ exp(logv) @ kx.T) for (N, h, w) ``logv``, shifted per row then per column."""
    lo, tiny = EXP_FLOOR[logv.dtype], torch.finfo(logv.dtype).tiny
    m1 = logv.amax(dim=2, keepdim=True).detach()
    m1 = torch.where(torch.isfinite(m1), m1, torch.zeros_like(m1))
    z = torch.exp((logv - m1).clamp_min(lo)) @ kx.T
    logz = torch.log(z.clamp_min(tiny)) + m1
    m2 = logz.amax(dim=1, keepdim=True).detach()
    w = ky @ torch.exp((logz - m2).clamp_min(lo))
    return torch.log(w.clamp_min(tiny)) + m2


def _sep_apply_(ky: torch.Tensor, kx: torch.Tensor, logv: torch.Tensor) -> torch.Tensor:
    # in-place twin of _sep_apply for the no-grad iterations; overwrites logv
    lo, tiny = EXP_FLOOR[logv.dtype], torch.finfo(logv.dtype).tiny
    m1 = logv.amax(dim=2, keepdim=True)
    m1.nan_to_num_(neginf=0.0)
    z = torch.matmul(logv.sub_(m1).clamp_min_(lo).exp_(), kx.T)
    z.clamp_min_(tiny).log_().add_(m1)
    m2 = z.amax(dim=1, keepdim=True)
    w = torch.matmul(ky, z.sub_(m2).clamp_min_(lo).exp_())
    return w.clamp_min_(tiny).log_().add_(m2)


class _DenseKernel:
    def __init__(self, h: int, w: int, reg: float, dtype, device):
        cy, cx = _sq_dist(h, dtype, device), _sq_dist(w, dtype, device)
        self.cost = (cy[:, None, :, None] + cx[None, :, None, :]).reshape(h * w, h * w)
        self.scaled = self.cost / reg

    def lse(self, logv: torch.Tensor) -> torch.Tensor:
        # log sum_q exp(logv_q - C_pq / reg) for every p (C is symmetric)
        return torch.logsumexp(logv[:, None, :] - self.scaled, dim=-1)

    lse_ = lse

    def transport_cost(self, logu, logv):
        logp = logu[:, :, None] + logv[:, None, :] - self.scaled
        return (torch.exp(logp) * self.cost).sum(dim=(1, 2))


def _flush(k: torch.Tensor) -> torch.Tensor:
    # subnormal kernel entries make matmul crawl; they carry no usable mass
    return torch.where(k.abs() < torch.finfo(k.dtype).tiny, torch.zeros_like(k), k)


class _SeparableKernel:
    def __init__(self, h: int, w: int, reg: float, dtype, device):
        self.h, self.w = h, w
        cy, cx = _sq_dist(h, dtype, device), _sq_dist(w, dtype, device)
        ky, kx = torch.exp(-cy / reg), torch.exp(-cx / reg)
        self.kyc, self.kxc = _flush(ky * cy), _flush(kx * cx)
        self.ky, self.kx = _flush(ky), _flush(kx)

    def lse(self, logv: torch.Tensor) -> torch.Tensor:
        # squared-Euclidean grid kernels are symmetric, so no transpose is needed
        N = logv.shape[0]
        return _sep_apply(self.ky, self.kx, logv.reshape(N, self.h, self.w)).reshape(N, -1)

    def lse_(self, logv: torch.Tensor) -> torch.Tensor:
        N = logv.shape[0]
        return _sep_apply_(self.ky, self.kx, logv.reshape(N, self.h, self.w)).reshape(N, -1)

    def transport_cost(self, logu, logv):
        N = logu.shape[0]
        logv = logv.reshape(N, self.h, self.w)
        logs = torch.logaddexp(_sep_apply(self.kyc, self.kx, logv), _sep_apply(self.ky, self.kxc, logv))
        return torch.exp(logu.reshape(N, self.h, self.w) + logs).flatten(1).sum(-1)


def _safe_log(x: torch.Tensor) -> torch.Tensor:
    # -inf on empty bins without poisoning the gradient with 0 * inf
    pos = x > 0
    return torch.where(pos, torch.log(torch.where(pos, x, torch.ones_like(x))),
                       torch.full_like(x, -math.inf))


def entropic_ot(a: torch.Tensor, b: torch.Tensor, reg: float, iters: int = 100,
                tol: float = 1e-6, dense: bool | None = None,
                unroll: int | None = None, dtype: torch.dtype | None = None) -> torch.Tensor:
    """Transport cost <P, C> of the entropic plan between (N, h, w) distributions.

    C is the squared Euclidean distance between pixel centers (unit spacing).
    The plan comes from alternating log-domain scaling updates. On small
    (dense) grids autograd sees every update, so the gradient is the exact
    derivative of the returned value. On large grids it sees only the last
    ``unroll`` updates (default 10) and earlier ones run without a graph.
    Small grids are solved in float64, large ones in float32 unless ``dtype``
    says otherwise.
    """
    if reg <= 0:
        raise ValueError(f"reg must be positive, got {reg}")
    N, h, w = a.shape
    if dense is None:
        dense = h * w <= DENSE_OT_MAX_BINS
    if dtype is None:
        dtype = torch.float64 if dense else torch.float32
    a = a.to(dtype).reshape(N, -1)
    b = b.to(dtype).reshape(N, -1)
    unroll = iters if dense else min(iters, 10 if unroll is None else unroll)
    with _flush_subnormals():
        return _solve(a, b, reg, iters, tol, dense, unroll, h, w)


@contextlib.contextmanager
def _flush_subnormals():
    # products of tiny kernel entries and tiny scalings go subnormal in the
    # matmuls; flushing them to zero keeps the CPU on its fast path
    torch.set_flush_denormal(True)
    try:
        yield
    finally:
        torch.set_flush_denormal(False)


def _solve(a, b, reg, iters, tol, dense, unroll, h, w):
    dtype = a.dtype
    kern = (_DenseKernel if dense else _SeparableKernel)(h, w, reg, dtype, a.device)
    loga, logb = _safe_log(a), _safe_log(b)
    track = torch.is_grad_enabled()
    # potentials are kept divided by reg: phi = f / reg, psi = g / reg
    with torch.no_grad():
        phi = torch.zeros_like(a)
        psi = torch.zeros_like(b)
        warm = max(iters - unroll, 0) if track else iters
        done = 0
        while done < warm:
            phi_prev = phi
            psi = kern.lse_(phi + loga).neg_()
            phi = kern.lse_(psi + logb).neg_()
            done += 1
            if done % 10 == 0 or done == warm:
                # row-marginal error of the plan defined by (phi_prev, psi)
                err = (a * torch.expm1(torch.where(a > 0, phi_prev - phi, 0.0)).abs()).sum(-1).max()
                if float(err) < tol:
                    break
        converged = done < warm
    if track:
        for _ in range(unroll if converged else iters - done):
            psi = -kern.lse(phi + loga)
            phi = -kern.lse(psi + logb)
    return kern.transport_cost(phi + loga, psi + logb)


def ot_loss(preds: torch.Tensor, gt: torch.Tensor, reg: float = 10.0, iters: int = 100,
            tol: float = 1e-6, flags: list[str] | None = None,
            dense: bool | None = None, unroll: int | None = None) -> torch.Tensor:
    preds, gt = _batched(preds), _batched_gt(gt)
    _check_same_res(preds, gt)
    B, K, h, w = preds.shape
    a, b, valid = _normalized(preds, gt, flags, "ot")
    idx = valid.flatten().nonzero().flatten()
    if idx.numel() == 0:
        return preds.sum() * 0.0
    src = a.reshape(B * K, h, w)[idx]
    dst = b[:, None].expand(B, K, -1).reshape(B * K, h, w)[idx]
    cost = entropic_ot(src, dst, reg, iters, tol, dense=dense, unroll=unroll)
    return cost.sum().to(preds.dtype) / B


def l2_pixel_loss(preds: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    preds, gt = _batched(preds), _batched_gt(gt)
    _check_same_res(preds, gt)
    return ((preds - gt[:, None]) ** 2).sum(dim=(1, 2, 3)).mean()


# -- region level -------------------------------------------------------------

def make_region_pyramid(h: int, w: int, crops: int = 4) -> list[tuple[int, int, int, int]]:
    """Concentric (r0, r1, c0, c1) windows shrinking by 0.75 per step; first is the full map."""
    if crops < 1:
        raise ValueError("need at least one crop")
    if h < 4 or w < 4:
        raise ValueError(f"map {h}x{w} too small for a crop pyramid")
    boxes = []
    for m in range(crops):
        sh = int(math.floor(CROP_SCALE ** m * h + 0.5))
        sw = int(math.floor(CROP_SCALE ** m * w + 0.5))
        if sh < 2 or sw < 2:
            log.warning("crop pyramid truncated to %d levels for a %dx%d map", m, h, w)
            break
        r0, c0 = (h - sh) // 2, (w - sw) // 2
        boxes.append((r0, r0 + sh, c0, c0 + sw))
    return boxes


def _region_sums(preds: torch.Tensor, boxes) -> torch.Tensor:
    return torch.stack([preds[..., r0:r1, c0:c1].sum(dim=(-2, -1)) for r0, r1, c0, c1 in boxes],
                       dim=-1)


def ranking_loss(preds: torch.Tensor, crops: int = 4, scales: list[int] | None = None) -> torch.Tensor:
    """Hinge on every nested pair where the smaller crop holds more mass than the larger."""
    preds = _batched(preds)
    if scales is not None:
        preds = preds[:, scales]
    boxes = make_region_pyramid(*preds.shape[-2:], crops)
    sums = _region_sums(preds, boxes)  # (B, K, M), index 0 = largest
    M = sums.shape[-1]
    total = preds.new_zeros(preds.shape[0])
    for m in range(M - 1):
        for n in range(m + 1, M):
            total = total + F.relu(sums[..., n] - sums[..., m]).sum(dim=1)
    return total.mean()


def _kl(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    return (p * (torch.log(p) - torch.log(q))).sum(-1)


def consistency_loss(preds: torch.Tensor, crops: int = 4, divergence: str = "kl",
                     detach_target: bool = True, flags: list[str] | None = None) -> torch.Tensor:
    """Sum over crops and scales of KL(normalized crop || mean normalized crop)."""
    if divergence not in ("kl", "js"):
        raise ValueError(f"unknown divergence {divergence!r}")
    preds = _batched(preds)
    B, K = preds.shape[:2]
    boxes = make_region_pyramid(*preds.shape[-2:], crops)
    total = preds.new_zeros(B)
    for r0, r1, c0, c1 in boxes:
        c = preds[..., r0:r1, c0:c1].reshape(B, K, -1)
        mass = c.sum(-1)
        valid = (mass > MASS_EPS).to(c.dtype)  # (B, K)
        if flags is not None and bool((valid == 0).any()):
            flags.append(f"consistency: {int((valid == 0).sum())} all-zero crop(s)")
        p = c / torch.where(mass > MASS_EPS, mass, torch.ones_like(mass))[..., None]
        p = (p + KL_FLOOR) / (1.0 + KL_FLOOR * p.shape[-1])
        n_valid = valid.sum(1, keepdim=True).clamp_min(1.0)
        # mean written as offset from one scale so identical scales give avg == p exactly
        ref = p[:, :1]
        avg = ref + ((p - ref) * valid[..., None]).sum(1, keepdim=True) / n_valid[..., None]
        if detach_target:
            avg = avg.detach()
        if divergence == "kl":
            d = _kl(p, avg)
        else:
            mix = 0.5 * (p + avg)
            d = 0.5 * _kl(p, mix) + 0.5 * _kl(avg.expand_as(p), mix)
        total = total + (d * valid).sum(1)
    return total.mean()


# -- image level --------------------------------------------------------------

def global_count_loss_labeled(t: torch.Tensor, t_gt: torch.Tensor) -> torch.Tensor:
    t = t.unsqueeze(0) if t.dim() == 1 else t
    t_gt = torch.as_tensor(t_gt, dtype=t.dtype, device=t.device).reshape(-1)
    return (t - t_gt[:, None]).abs().sum(dim=1).mean()


def global_count_loss_unlabeled(t: torch.Tensor, detach_target: bool = True) -> torch.Tensor:
    t = t.unsqueeze(0) if t.dim() == 1 else t
    avg = t.mean(dim=1, keepdim=True)
    if detach_target:
        avg = avg.detach()
    return (t - avg).abs().sum(dim=1).mean()


# -- total --------------------------------------------------------------------

def total_loss(labeled_pred=None, labeled_gt=None, labeled_counts=None, unlabeled_pred=None,
               weights: LossWeights | None = None,
               switches: LossSwitches | None = None) -> tuple[torch.Tensor, LossReport]:
    """Weighted sum of all terms.

    ``labeled_pred`` / ``unlabeled_pred`` are (maps, token_counts) pairs or None;
    ``labeled_gt`` holds (B, h, w) target maps and ``labeled_counts`` the (B,)
    annotated tree counts.
    """
    w = weights or LossWeights()
    sw = switches or LossSwitches()
    if labeled_pred is None and unlabeled_pred is None:
        raise ValueError("total_loss needs at least one branch")
    rep = LossReport()
    terms: dict[str, torch.Tensor] = {}
    zero = None

    if labeled_pred is not None:
        maps, tokens = labeled_pred
        zero = maps.sum() * 0.0
        if sw.l2_pixel:
            terms["L_c"] = l2_pixel_loss(maps, labeled_gt)
            terms["L_ot"] = terms["L_tv"] = zero
            l_dm = terms["L_c"]
        else:
            terms["L_c"] = counting_loss(maps, labeled_gt)
            terms["L_ot"] = ot_loss(maps, labeled_gt, w.ot_reg, w.ot_iters, w.ot_tol, rep.flags,
                                    unroll=w.ot_unroll) \
                if w.alpha_ot > 0 else zero
            terms["L_tv"] = tv_loss(maps, labeled_gt, rep.flags)
            l_dm = w.alpha_count * terms["L_c"] + w.alpha_ot * terms["L_ot"] + w.alpha_tv * terms["L_tv"]
        if labeled_counts is None:
            labeled_counts = labeled_gt.sum(dim=(-2, -1))
        terms["L_ts"] = global_count_loss_labeled(tokens, labeled_counts) if sw.global_count else zero
        terms["L_dm"] = l_dm
        terms["L_s"] = l_dm + terms["L_ts"]

    if unlabeled_pred is not None:
        maps, tokens = unlabeled_pred
        uzero = maps.sum() * 0.0
        zero = uzero if zero is None else zero
        terms["L_rank"] = ranking_loss(maps, w.crops, [0] if sw.single_scale_ranking else None) \
            if sw.ranking else uzero
        terms["L_consis"] = consistency_loss(maps, 1 if sw.single_crop_consistency else w.crops,
                                             sw.divergence, sw.detach_targets, rep.flags) \
            if sw.consistency else uzero
        terms["L_tu"] = global_count_loss_unlabeled(tokens, sw.detach_targets) \
            if sw.global_count else uzero
        terms["L_u"] = terms["L_consis"] + terms["L_rank"] + terms["L_tu"]

    l_s = terms.get("L_s", zero)
    l_u = terms.get("L_u", zero)
    total = l_s + w.lam * l_u
    terms["L_total"] = total
    for k, v in terms.items():
        setattr(rep, k, float(v.detach()))
    return total, rep
