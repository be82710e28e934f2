"""Bundle-adjustment style training.

A training step takes a query image plus its retrieved neighbours, matches
them, reduces the matches to one per 8x8 patch, drops matches touching
low-confidence patches, links the rest into multi-view tracks and penalises
(a) the reprojection error of each track observation's predicted scene
coordinate and (b) the spread of the track's predictions around their mean.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Hashable, NamedTuple, Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .data import Frame
from .geometry import MIN_DEPTH, Intrinsics, Pose, angle_error, translation_error
from .keypoints import (
    N_CHANNELS,
    PATCH,
    NoSurvivors,
    PatchIndex,
    SelectionConfig,
    dynamic_threshold,
    patch_confidence,
    select_correspondences,
)
from .network import SceneCoordinateNet, brelu1, image_to_tensor, save_checkpoint
from .pnp import InsufficientInliers, RansacConfig, ransac_pnp

log = logging.getLogger(__name__)

ImageId = Hashable


class DivergenceDetected(RuntimeError):
    def __init__(self, msg, step: int, checkpoint: Path | None = None):
        super().__init__(msg)
        self.step = step
        self.checkpoint = checkpoint


class RetrievalProvider(Protocol):
    def retrieve(self, query_id, k: int) -> list: ...


class MatcherProvider(Protocol):
    def match(self, id_a, id_b): ...  # -> object with pixels_a, pixels_b, scores


@dataclass(frozen=True)
class LossWeights:
    beta: float = 100.0
    gamma: float = 0.25

    def __post_init__(self):
        if not self.beta > 0 or self.gamma < 0:
            raise ValueError("need beta > 0 and gamma >= 0")


@dataclass(frozen=True)
class Bundle:
    image_ids: tuple
    poses_gt: tuple
    intrinsics: tuple

    def __post_init__(self):
        if len(self.image_ids) < 2:
            raise ValueError("a bundle holds at least two images")
        if len(set(self.image_ids)) != len(self.image_ids):
            raise ValueError("bundle image ids must be distinct")


@dataclass(frozen=True)
class PatchMatch:
    image_a: ImageId
    image_b: ImageId
    patch_a: PatchIndex
    patch_b: PatchIndex
    pixel_a: tuple
    pixel_b: tuple
    score: float = 1.0


class Observation(NamedTuple):
    image: ImageId
    patch: PatchIndex
    pixel: tuple


@dataclass
class Track:
    observations: list[Observation]

    def __len__(self):
        return len(self.observations)


def _patch_of(pixel) -> PatchIndex:
    return PatchIndex(int(math.floor(pixel[0] / PATCH)), int(math.floor(pixel[1] / PATCH)))


def downsample_matches(image_a, image_b, raw) -> list[PatchMatch]:
    """Keep a single match per source patch of ``image_a``.

    The highest-scoring match wins; ties go to the source pixel that comes
    first in row-major order. Output is sorted by source patch (row-major).
    """
    pa = np.asarray(raw.pixels_a, dtype=np.float64).reshape(-1, 2)
    pb = np.asarray(raw.pixels_b, dtype=np.float64).reshape(-1, 2)
    scores = np.asarray(raw.scores, dtype=np.float64).reshape(-1)
    if len(scores) == 0:
        return []
    pu = np.floor(pa[:, 0] / PATCH).astype(np.int64)
    pv = np.floor(pa[:, 1] / PATCH).astype(np.int64)
    # patch row-major, then score descending, then pixel row-major
    order = np.lexsort((pa[:, 0], pa[:, 1], -scores, pu, pv))
    out = []
    last = None
    for n in order:
        key = (pv[n], pu[n])
        if key == last:
            continue
        last = key
        out.append(PatchMatch(image_a, image_b, PatchIndex(int(pu[n]), int(pv[n])), _patch_of(pb[n]),
                              (float(pa[n, 0]), float(pa[n, 1])), (float(pb[n, 0]), float(pb[n, 1])),
                              float(scores[n])))
    return out


def _confidence_grid(conf) -> np.ndarray:
    conf = np.asarray(conf)
    return patch_confidence(conf) if conf.ndim == 3 else conf


def mask_matches_by_confidence(matches: Sequence[PatchMatch], conf_maps, alpha: float) -> list[PatchMatch]:
    """Drop matches whose source or target patch is below its image's threshold.

    ``conf_maps`` maps image id to a (64, H, W) confidence volume or an
    already reduced (H, W) patch-confidence grid.
    """
    grids = {}
    thresholds = {}
    out = []
    for m in matches:
        for img in (m.image_a, m.image_b):
            if img not in grids:
                grids[img] = _confidence_grid(conf_maps[img])
                thresholds[img] = dynamic_threshold(grids[img], alpha)
        if (grids[m.image_a][m.patch_a.v, m.patch_a.u] >= thresholds[m.image_a]
                and grids[m.image_b][m.patch_b.v, m.patch_b.u] >= thresholds[m.image_b]):
            out.append(m)
    return out


def build_tracks(matches: Sequence[PatchMatch], refined_pixels=None) -> list[Track]:
    """Connected components over (image, patch) nodes.

    Components that visit one image twice are discarded. Observation pixels
    come from ``refined_pixels[image][v, u]`` when given, else from the match.
    Tracks are sorted by their first observation; observations by
    (image, row, column).
    """
    nodes: dict[tuple, int] = {}
    match_pixel: dict[tuple, tuple] = {}
    rows, cols = [], []
    for m in matches:
        a = (m.image_a, m.patch_a.v, m.patch_a.u)
        b = (m.image_b, m.patch_b.v, m.patch_b.u)
        for key, px in ((a, m.pixel_a), (b, m.pixel_b)):
            if key not in nodes:
                nodes[key] = len(nodes)
                match_pixel[key] = px
        rows.append(nodes[a])
        cols.append(nodes[b])
    if not nodes:
        return []
    n = len(nodes)
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    groups: dict[int, list[tuple]] = {}
    for key, idx in nodes.items():
        groups.setdefault(labels[idx], []).append(key)

    tracks = []
    for keys in groups.values():
        images = [k[0] for k in keys]
        if len(keys) < 2 or len(set(images)) != len(images):
            continue
        keys.sort(key=lambda k: (k[0], k[1], k[2]))
        obs = []
        for img, v, u in keys:
            if refined_pixels is not None:
                px = tuple(float(x) for x in np.asarray(refined_pixels[img])[v, u])
            else:
                px = match_pixel[(img, v, u)]
            obs.append(Observation(img, PatchIndex(u, v), px))
        tracks.append(Track(obs))
    tracks.sort(key=lambda t: (t.observations[0].image, t.observations[0].patch.v, t.observations[0].patch.u))
    return tracks


def _as_tensor(x, dtype=None):
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype or torch.float64)


def ba_loss(tracks: Sequence[Track], coord_maps, poses, k, pixel_maps=None,
            min_depth: float = MIN_DEPTH, behind_quantile: float = 0.95,
            behind_fallback: float = 1000.0) -> torch.Tensor:
    """Mean over tracks of summed reprojection error plus deviation from the track mean.

    For each observation i of a track with predicted scene coordinates y_i::

        ||p_i - proj(K, R_i y_i + t_i)|| + ||mean_j(y_j) - y_i||

    ``coord_maps[image]`` is a (3, H, W) tensor or array; gradients flow to
    it (and to ``pixel_maps[image]``, an (H, W, 2) tensor of observation
    pixels, if given). ``poses`` and ``k`` map image id to Pose/Intrinsics;
    ``k`` may also be a single Intrinsics shared by all images.
    Observations at depth <= ``min_depth`` contribute a constant penalty:
    the ``behind_quantile`` of the valid residuals in this call.
    """
    tracks = [t for t in tracks if len(t) >= 2]
    if not tracks:
        some = next(iter(coord_maps.values()), None) if coord_maps else None
        dtype = some.dtype if isinstance(some, torch.Tensor) else torch.float64
        return torch.zeros((), dtype=dtype)

    by_image: dict = {}
    track_idx = []
    for ti, t in enumerate(tracks):
        for o in t.observations:
            by_image.setdefault(o.image, []).append((len(track_idx), o))
            track_idx.append(ti)
    n_obs = len(track_idx)

    ys, cams, slots = [], [], []
    for img, items in by_image.items():
        cmap = _as_tensor(coord_maps[img])
        dtype = cmap.dtype
        vs = torch.tensor([o.patch.v for _, o in items])
        us = torch.tensor([o.patch.u for _, o in items])
        y = cmap[:, vs, us].T
        if pixel_maps is not None and img in pixel_maps:
            p = _as_tensor(pixel_maps[img], dtype)[vs, us]
        else:
            p = torch.tensor([o.pixel for _, o in items], dtype=dtype)
        pose = poses[img]
        kk = k[img] if isinstance(k, dict) else k
        R = torch.tensor(pose.rotation, dtype=dtype)
        t = torch.tensor(pose.translation, dtype=dtype)
        cam = y @ R.T + t
        z = cam[:, 2]
        valid = z > min_depth
        zs = torch.where(valid, z, torch.ones_like(z))
        proj = torch.stack([kk.fx * cam[:, 0] / zs + kk.cx, kk.fy * cam[:, 1] / zs + kk.cy], dim=1)
        res = torch.linalg.vector_norm(p - proj, dim=1)
        ys.append(y)
        cams.append((res, valid))
        slots.extend(s for s, _ in items)

    y_all = torch.cat(ys)
    res_all = torch.cat([r for r, _ in cams])
    valid_all = torch.cat([v for _, v in cams])
    if valid_all.any():
        penalty = torch.quantile(res_all[valid_all].detach(), behind_quantile)
    else:
        penalty = torch.tensor(behind_fallback, dtype=res_all.dtype)
    res_all = torch.where(valid_all, res_all, penalty.to(res_all.dtype))

    # restore track-major observation order
    order = torch.empty(n_obs, dtype=torch.long)
    order[torch.tensor(slots)] = torch.arange(n_obs)
    y_all = y_all[order]
    res_all = res_all[order]
    tid = torch.tensor(track_idx)
    n_tracks = len(tracks)
    counts = torch.bincount(tid, minlength=n_tracks).to(y_all.dtype)
    means = torch.zeros(n_tracks, 3, dtype=y_all.dtype).index_add(0, tid, y_all) / counts[:, None]
    dev = torch.linalg.vector_norm(means[tid] - y_all, dim=1)
    per_track = torch.zeros(n_tracks, dtype=y_all.dtype).index_add(0, tid, res_all + dev)
    return per_track.mean()


def total_loss(angle, trans, ba, w: LossWeights = LossWeights()):
    return angle + w.beta * trans + w.gamma * ba


def soft_pixel_map(conf: torch.Tensor, temperature: float) -> torch.Tensor:
    """(64, H, W) confidences -> (H, W, 2) soft-argmax keypoint pixels."""
    _, h, w = conf.shape
    wts = torch.softmax(conf / temperature, dim=0)
    c = torch.arange(N_CHANNELS, dtype=conf.dtype)
    i = torch.einsum("chw,c->hw", wts, c % PATCH)
    j = torch.einsum("chw,c->hw", wts, torch.div(c, PATCH, rounding_mode="floor"))
    vv, uu = torch.meshgrid(torch.arange(h, dtype=conf.dtype), torch.arange(w, dtype=conf.dtype), indexing="ij")
    return torch.stack([PATCH * uu + i + 0.5, PATCH * vv + j + 0.5], dim=-1)


def confidence_targets(coords: np.ndarray, pose: Pose, k: Intrinsics):
    """Ground-truth channel per patch from reprojected scene coordinates.

    Returns (valid mask (H, W), channel index (H, W)).
    """
    _, h, w = coords.shape
    valid = np.isfinite(coords).all(axis=0)
    channel = np.zeros((h, w), dtype=np.int64)
    if valid.any():
        cam = pose.transform(coords[:, valid].T)
        ok = cam[:, 2] > MIN_DEPTH
        vv, uu = np.nonzero(valid)
        x = k.fx * cam[:, 0] / np.where(ok, cam[:, 2], 1.0) + k.cx
        y = k.fy * cam[:, 1] / np.where(ok, cam[:, 2], 1.0) + k.cy
        i = np.clip(np.floor(x) - PATCH * uu, 0, PATCH - 1).astype(np.int64)
        j = np.clip(np.floor(y) - PATCH * vv, 0, PATCH - 1).astype(np.int64)
        channel[vv, uu] = j * PATCH + i
        valid[vv[~ok], uu[~ok]] = False
    return valid, channel


def confidence_loss(logits: torch.Tensor, valid: torch.Tensor, channel: torch.Tensor) -> torch.Tensor:
    """Per-channel binary cross-entropy on the pre-activation confidence volume.

    Positive target only at the ground-truth channel of valid patches.
    Summed over the 64 channels, averaged over patches.
    """
    target = torch.zeros_like(logits)
    target.scatter_(0, channel[None], valid[None].to(logits.dtype))
    return F.binary_cross_entropy_with_logits(logits, target, reduction="none").sum(0).mean()


@dataclass
class TrainConfig:
    steps: int = 1500
    lr: float = 1e-3
    lr_schedule: str = "cosine"  # or "constant"; cosine anneals to lr * lr_min_ratio over `steps`
    lr_min_ratio: float = 0.01
    k: int = 2
    alpha: float = 0.8
    beta: float = 100.0
    gamma: float = 0.25
    temperature: float = 0.05
    # the BA term's gradients are orders of magnitude larger; a small weight
    # leaves the confidence head stuck at its prior
    conf_weight: float = 50.0
    data_seed: int = 0
    pose_mode: str = "gt"  # or "pnp": PnP poses (as constants) in the reprojection term
    monitor_pnp: bool = True
    inlier_threshold_px: float = 10.0
    plateau_window: int = 0  # 0 disables early stopping
    plateau_tol: float = 0.01
    log_every: int = 25
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.pose_mode not in ("gt", "pnp"):
            raise ValueError("pose_mode must be 'gt' or 'pnp'")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.beta, self.gamma)


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    stopped_early: bool = False


def _pnp_pose(coord, conf, frame: Frame, alpha, threshold, seed) -> Pose | None:
    h, w = frame.image.shape[:2]
    try:
        corrs = select_correspondences(coord, conf, SelectionConfig(alpha), (h, w))
        est = ransac_pnp(corrs, frame.intrinsics, RansacConfig(inlier_threshold_px=threshold, rng_seed=seed))
    except (NoSurvivors, InsufficientInliers):
        return None
    return est.pose


def _plateaued(losses, window, tol) -> bool:
    if window <= 0 or len(losses) < 2 * window:
        return False
    prev = float(np.mean(losses[-2 * window:-window]))
    cur = float(np.mean(losses[-window:]))
    return prev - cur <= tol * abs(prev)


def train(model: SceneCoordinateNet, frames: Sequence[Frame], providers, schedule: TrainConfig,
          log_path=None, checkpoint_path=None,
          on_step: Callable[[dict], None] | None = None) -> TrainResult:
    """Optimise ``model`` in place over bundles drawn from ``frames``.

    ``providers`` must offer ``retrieve(query_index, k)`` and
    ``match(index_a, index_b)``; image ids are indices into ``frames``.
    Each step logs one JSON record to ``log_path``. Raises
    DivergenceDetected (weights left at the last finite step) on a
    non-finite loss.
    """
    cfg = schedule
    weights = cfg.weights
    rng = np.random.default_rng(cfg.data_seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    sched = None
    if cfg.lr_schedule == "cosine":
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(cfg.steps, 1), eta_min=cfg.lr * cfg.lr_min_ratio)
    result = TrainResult()
    log_file = open(log_path, "w") if log_path else None
    targets = {}
    order: list[int] = []
    losses = []
    model.train()
    try:
        for step in range(cfg.steps):
            if not order:
                order = list(rng.permutation(len(frames)))
            q = int(order.pop(0))
            nbrs = [int(n) for n in providers.retrieve(q, cfg.k)]
            ids = [q] + nbrs
            batch = torch.cat([image_to_tensor(frames[i].image) for i in ids])
            coord, logits = model.forward_raw(model.normalize(batch))
            conf = brelu1(logits)
            coord_np = coord.detach().double().numpy()
            conf_np = conf.detach().double().numpy()
            grids = {i: patch_confidence(conf_np[b]) for b, i in enumerate(ids)}

            raw = 0
            matches = []
            for nb in nbrs:
                m = providers.match(q, nb)
                raw += len(m.scores)
                matches += downsample_matches(q, nb, m)
            kept = mask_matches_by_confidence(matches, grids, cfg.alpha)
            tracks = build_tracks(kept)

            coord_maps = {i: coord[b].double() for b, i in enumerate(ids)}
            pixel_maps = {i: soft_pixel_map(conf[b].double(), cfg.temperature) for b, i in enumerate(ids)}
            intr = {i: frames[i].intrinsics for i in ids}
            if cfg.pose_mode == "pnp":
                poses = {}
                for b, i in enumerate(ids):
                    est = _pnp_pose(coord_np[b], conf_np[b], frames[i], cfg.alpha, cfg.inlier_threshold_px, step)
                    poses[i] = est if est is not None else frames[i].pose
            else:
                poses = {i: frames[i].pose for i in ids}
            l_ba = ba_loss(tracks, coord_maps, poses, intr, pixel_maps=pixel_maps)

            l_conf = torch.zeros((), dtype=torch.float64)
            n_sup = 0
            for b, i in enumerate(ids):
                if frames[i].coords is None:
                    continue
                if i not in targets:
                    valid, channel = confidence_targets(frames[i].coords, frames[i].pose, frames[i].intrinsics)
                    targets[i] = (torch.from_numpy(valid), torch.from_numpy(channel))
                l_conf = l_conf + confidence_loss(logits[b], *targets[i]).double()
                n_sup += 1
            if n_sup:
                l_conf = l_conf / n_sup

            l_angle = l_trans = None
            survivors = 0
            if cfg.monitor_pnp:
                h, w = frames[q].image.shape[:2]
                try:
                    corrs = select_correspondences(coord_np[0], conf_np[0], SelectionConfig(cfg.alpha), (h, w))
                    survivors = len(corrs)
                    est = ransac_pnp(corrs, frames[q].intrinsics,
                                     RansacConfig(inlier_threshold_px=cfg.inlier_threshold_px, rng_seed=step))
                    l_angle = angle_error(frames[q].pose.rotation, est.pose.rotation)
                    l_trans = translation_error(frames[q].pose.translation, est.pose.translation)
                except (NoSurvivors, InsufficientInliers):
                    pass

            # the metric terms are constants here: PnP is not differentiated
            metric = total_loss(l_angle or 0.0, l_trans or 0.0, 0.0, weights)
            loss = total_loss(0.0, 0.0, l_ba, weights) + cfg.conf_weight * l_conf
            if not torch.isfinite(loss):
                ckpt = None
                if checkpoint_path:
                    ckpt = Path(checkpoint_path)
                    save_checkpoint(model, ckpt, {"train_config": asdict(cfg), "step": step})
                raise DivergenceDetected(f"non-finite loss at step {step}", step, ckpt)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            if sched is not None:
                sched.step()

            rec = {
                "step": step,
                "query": q,
                "loss": float(loss.detach()) + metric,
                "L_angle": l_angle,
                "L_trans": l_trans,
                "L_BA": float(l_ba.detach()),
                "L_conf": float(l_conf.detach()),
                "matches_raw": raw,
                "matches_patch": len(matches),
                "matches_kept": len(kept),
                "tracks": len(tracks),
                "survivors": survivors,
            }
            result.history.append(rec)
            losses.append(float(loss.detach()))
            if log_file:
                log_file.write(json.dumps(rec) + "\n")
                log_file.flush()
            if on_step:
                on_step(rec)
            if cfg.log_every and step % cfg.log_every == 0:
                log.info("step %d loss %.4f L_BA %.3f L_conf %.4f tracks %d", step, rec["loss"],
                         rec["L_BA"], rec["L_conf"], len(tracks))
            if checkpoint_path and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(model, checkpoint_path, {"train_config": asdict(cfg), "step": step + 1})
            if _plateaued(losses, cfg.plateau_window, cfg.plateau_tol):
                result.stopped_early = True
                break
    finally:
        if log_file:
            log_file.close()
    model.eval()
    if checkpoint_path:
        save_checkpoint(model, checkpoint_path, {"train_config": asdict(cfg), "step": len(result.history)})
    return result
