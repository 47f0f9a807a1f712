"""Cloud adaptation, pseudo-labelling, edge retraining and the repeating cycle."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import torch
from torch import nn

from .alignment import (
    SOURCE,
    TARGET,
    AdvLossWeights,
    DomainDiscriminators,
    compute_soft_mask,
    confident_queries,
    decoder_foreground_weights,
    dqfa_loss,
    filter_pseudo_labels,
    tiafa_decoder_loss,
    tiafa_encoder_loss,
    total_adversarial_loss,
)
from .boxes import BoxLabel
from .detector import Detector, DetectorOutput, ModelConfig, edge_config
from .losses import LossWeights, detection_loss
from .matching import Assignment, hungarian_match
from .metrics import evaluate_map
from .synthdata import DomainDataset, TargetStream, training_guard
from .types import DetectionSet

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


@dataclass(frozen=True)
class Flags:
    dqfa: bool = True
    tiafa: bool = True
    vpg: bool = True

    @property
    def adversarial(self) -> bool:
        return self.dqfa or self.tiafa


@dataclass
class TrainConfig:
    batch_size: int = 8
    # cloud pre-training on the source domain
    pretrain_epochs: int = 60
    pretrain_lr: float = 1e-3
    # final pre-training epochs run at a tenth of the learning rate
    pretrain_lr_drop_epochs: int = 10
    # per-cycle adaptation
    adapt: bool = True
    adapt_epochs: int = 10
    lr_detector: float = 1e-4
    lr_vpg: float = 1e-3
    lr_discriminator: float = 1e-3
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    grl_warmup: float = 0.2
    disc_hidden: int = 64
    flags: Flags = field(default_factory=Flags)
    adv: AdvLossWeights = field(default_factory=AdvLossWeights)
    loss: LossWeights = field(default_factory=LossWeights)
    match_cost: tuple[float, float, float] = (1.0, 5.0, 2.0)
    # edge model
    edge_pretrain_epochs: int = 60
    edge_pretrain_lr: float = 1e-3
    edge_epochs: int = 10
    edge_lr: float = 2e-4
    eval_iou: float = 0.5


def stable_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def parameter_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class CloudModelState:
    detector: Detector
    discriminators: DomainDiscriminators
    cycle: int = 0
    config_hash: str = ""
    optimizer_state: dict | None = None

    def check(self) -> None:
        expected = stable_hash(self.detector.cfg.to_dict())
        if self.config_hash and self.config_hash != expected:
            raise ValueError("cloud model state was built for a different configuration")


def new_cloud_state(model_cfg: ModelConfig, seed: int, disc_hidden: int = 64) -> CloudModelState:
    torch.manual_seed(seed)
    detector = Detector(model_cfg)
    discs = DomainDiscriminators(model_cfg.d_model, disc_hidden)
    return CloudModelState(detector, discs, 0, stable_hash(model_cfg.to_dict()))


def _generator(seed: int, *tags) -> torch.Generator:
    key = stable_hash([seed, *tags])
    return torch.Generator().manual_seed(int(key, 16) % (2**63))


def _batches(n: int, batch_size: int, gen: torch.Generator) -> list[list[int]]:
    perm = torch.randperm(n, generator=gen).tolist()
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def match_batch(det: DetectionSet, targets: list[list[BoxLabel]], cost) -> list[Assignment]:
    return [hungarian_match(det[i], targets[i], cost) for i in range(len(targets))]


def _check_outputs(det: DetectionSet, step: int) -> None:
    # non-finite predictions would otherwise surface as a matching error
    if not (torch.isfinite(det.class_logits).all() and torch.isfinite(det.boxes).all()):
        raise TrainingDiverged(step, float("nan"))


def _step(optimizer, params, loss, clip: float, step: int) -> None:
    if not torch.isfinite(loss):
        raise TrainingDiverged(step, float(loss))
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if clip > 0:
        torch.nn.utils.clip_grad_norm_(params, clip)
    optimizer.step()


def train_supervised(
    model: Detector,
    images: torch.Tensor,
    labels: list[list[BoxLabel]],
    epochs: int,
    lr: float,
    seed: int,
    cfg: TrainConfig,
    tag: str = "supervised",
) -> list[float]:
    """Plain set-prediction training; returns the per-epoch mean loss."""
    if epochs <= 0 or len(images) == 0:
        return []
    params = [p for p in model.parameters()]
    opt = torch.optim.AdamW(params, lr=lr, weight_decay=cfg.weight_decay)
    gen = _generator(seed, tag)
    history = []
    step = 0
    model.train()
    for _ in range(epochs):
        total = 0.0
        batches = _batches(len(images), cfg.batch_size, gen)
        for idx in batches:
            out = model(images[idx])
            _check_outputs(out.detections, step)
            tgts = [labels[i] for i in idx]
            asg = match_batch(out.detections, tgts, cfg.match_cost)
            loss = detection_loss(out.detections, tgts, asg, cfg.loss)
            _step(opt, params, loss, cfg.grad_clip, step)
            total += float(loss.detach())
            step += 1
        history.append(total / len(batches))
    return history


def grl_strength(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warm-up of the reversal strength over the first ``grl_warmup`` of steps."""
    warm = cfg.grl_warmup * total_steps
    if warm <= 0:
        return cfg.adv.grl_lambda
    return cfg.adv.grl_lambda * min(1.0, step / warm)


def adversarial_terms(
    out: DetectorOutput,
    label: int,
    fg_targets: list[list[BoxLabel]] | None,
    discs: DomainDiscriminators,
    cfg: TrainConfig,
    strength: float,
) -> dict[str, torch.Tensor]:
    """Alignment losses for one batch of one domain.

    ``fg_targets`` are ground truth (source) or filtered pseudo-labels
    (target) used to pick the foreground queries for instance alignment.
    """
    parts: dict[str, torch.Tensor] = {}
    flags, w = cfg.flags, cfg.adv
    if flags.dqfa:
        parts["dqfa"] = dqfa_loss(out.domain_token("enc"), out.domain_token("dec"), label, w, discs, strength)
    if flags.tiafa and fg_targets is not None:
        mem = out.memory.select("image")
        queries = out.decoded.select("object_query")
        enc_terms, dec_terms = [], []
        for i, tgts in enumerate(fg_targets):
            asg = hungarian_match(out.detections[i].detach(), tgts, cfg.match_cost)
            weights = decoder_foreground_weights(asg, queries.shape[1])
            if not asg.pairs:
                continue
            matched = queries[i, asg.query_indices]
            psi = compute_soft_mask(mem[i].detach(), matched.detach())
            if psi is not None:
                enc_terms.append(tiafa_encoder_loss(mem[i], psi, label, discs.enc_instance, strength))
            dec_terms.append(tiafa_decoder_loss(queries[i], weights, label, discs.dec_instance, strength))
        # average over the samples that have foreground
        if enc_terms:
            parts["tiafa_enc"] = torch.stack(enc_terms).mean()
        if dec_terms:
            parts["tiafa_dec"] = torch.stack(dec_terms).mean()
    return parts


@torch.no_grad()
def predict(model: Detector, images: torch.Tensor, flags: Flags | None = None, batch_size: int = 64) -> list[DetectionSet]:
    """Per-image detections; prompt / domain-query tokens follow ``flags``."""
    use_prompt = bool(flags and flags.vpg and model.cfg.adaptation_modules)
    use_dq = bool(flags and flags.dqfa and model.cfg.adaptation_modules)
    was_training = model.training
    model.eval()
    out = []
    for start in range(0, len(images), batch_size):
        det = model(images[start : start + batch_size], use_prompt=use_prompt, use_domain_query=use_dq).detections
        out.extend(det.detach().split())
    model.train(was_training)
    return out


def adapt_cloud_model(
    source: DomainDataset,
    target: DomainDataset,
    state: CloudModelState,
    cfg: TrainConfig,
    seed: int,
) -> tuple[CloudModelState, list[float]]:
    """Joint source/target adaptation; returns the state and per-epoch mean ``L_all``.

    The source batch drives the detection loss; both batches feed the
    discriminators with their domain labels. Target annotations are never read.
    """
    if len(source) == 0 or len(target) == 0:
        raise ValueError("adaptation needs non-empty source and target sets")
    state.check()
    model, discs = state.detector, state.discriminators
    flags = cfg.flags
    history: list[float] = []
    if cfg.adapt_epochs <= 0:
        state.cycle += 1
        return state, history

    groups = [{"params": model.detector_parameters(), "lr": cfg.lr_detector}]
    if model.cfg.adaptation_modules:
        groups.append({"params": list(model.vpg.parameters()), "lr": cfg.lr_vpg})
    groups.append({"params": list(discs.parameters()), "lr": cfg.lr_discriminator})
    opt = torch.optim.AdamW(groups, weight_decay=cfg.weight_decay)
    clip_params = [p for g in groups for p in g["params"]]

    src_labels = [source.truth(i) for i in range(len(source))]
    src_gen = _generator(seed, "supervised")
    tgt_gen = _generator(seed, "target", state.cycle)
    n_src = math.ceil(len(source) / cfg.batch_size)
    n_tgt = math.ceil(len(target) / cfg.batch_size)
    # without alignment terms an epoch is exactly one pass over the source
    steps_per_epoch = max(n_src, n_tgt) if flags.adversarial else n_src
    total_steps = steps_per_epoch * cfg.adapt_epochs
    step = 0

    with training_guard():
        model.train()
        discs.train()
        for _epoch in range(cfg.adapt_epochs):
            pseudo = None
            if flags.tiafa:
                # teacher = current weights, refreshed once per epoch
                dets = predict(model, target.images, flags)
                pseudo = [filter_pseudo_labels(d, cfg.adv.tau) for d in dets]
            src_order = _batches(len(source), cfg.batch_size, src_gen)
            tgt_order: list[list[int]] = []
            epoch_total = 0.0
            for k in range(steps_per_epoch):
                if k >= len(src_order):
                    src_order += _batches(len(source), cfg.batch_size, src_gen)
                s_idx = src_order[k]
                out_s = model(source.images[s_idx], use_prompt=flags.vpg, use_domain_query=flags.dqfa)
                _check_outputs(out_s.detections, step)
                s_tgts = [src_labels[i] for i in s_idx]
                asg = match_batch(out_s.detections, s_tgts, cfg.match_cost)
                loss = detection_loss(out_s.detections, s_tgts, asg, cfg.loss)
                if flags.adversarial:
                    if k >= len(tgt_order):
                        tgt_order += _batches(len(target), cfg.batch_size, tgt_gen)
                    t_idx = tgt_order[k]
                    strength = grl_strength(step, total_steps, cfg)
                    out_t = model(target.images[t_idx], use_prompt=flags.vpg, use_domain_query=flags.dqfa)
                    _check_outputs(out_t.detections, step)
                    t_fg = [pseudo[i] for i in t_idx] if pseudo is not None else None
                    parts_s = adversarial_terms(out_s, SOURCE, s_tgts, discs, cfg, strength)
                    parts_t = adversarial_terms(out_t, TARGET, t_fg, discs, cfg, strength)
                    loss = loss + total_adversarial_loss(parts_s, cfg.adv) + total_adversarial_loss(parts_t, cfg.adv)
                _step(opt, clip_params, loss, cfg.grad_clip, step)
                if flags.vpg:
                    model.vpg.ema_update()
                epoch_total += float(loss.detach())
                step += 1
            history.append(epoch_total / steps_per_epoch)
    state.cycle += 1
    return state, history


def generate_pseudo_labels(
    state: CloudModelState, target: DomainDataset, tau: float, flags: Flags | None = None
) -> tuple[list[tuple[int, list[BoxLabel]]], list[DetectionSet]]:
    """Filtered predictions per target image, plus the kept-query ``DetectionSet``s."""
    if len(target) == 0:
        return [], []
    dets = predict(state.detector, target.images, flags)
    out, kept = [], []
    for sid, det in zip(target.ids, dets):
        keep = confident_queries(det, tau)
        mask = torch.zeros(det.class_logits.shape[0], dtype=torch.bool)
        mask[keep] = True
        out.append((sid, filter_pseudo_labels(det, tau)))
        kept.append(DetectionSet(det.class_logits, det.boxes, mask))
    return out, kept


def retrain_edge_model(
    edge: Detector,
    images: torch.Tensor,
    pseudo_labeled: list[tuple[int, list[BoxLabel]]],
    cfg: TrainConfig,
    seed: int,
) -> Detector:
    """Supervised fine-tuning of the edge detector on pseudo-labels, in place."""
    if not pseudo_labeled or not any(labels for _, labels in pseudo_labeled):
        log.info("no pseudo-labels: edge model left unchanged")
        return edge
    if len(pseudo_labeled) != len(images):
        raise ValueError("one pseudo-label list per image is required")
    with training_guard():
        train_supervised(edge, images, [labels for _, labels in pseudo_labeled], cfg.edge_epochs, cfg.edge_lr,
                         seed, cfg, tag="edge")
    return edge


@dataclass
class CycleReport:
    cycle: int
    stream: str
    pseudo_label_map: float
    edge_map: float
    n_pseudo_labels: int
    adapted: bool
    dqfa: bool
    tiafa: bool
    vpg: bool
    seed: int
    adapt_loss: list[float] = field(default_factory=list)
    cloud_hash: str = ""
    edge_hash: str = ""

    def __post_init__(self):
        for name in ("pseudo_label_map", "edge_map"):
            v = getattr(self, name)
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"{name}={v} outside [0, 100]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PretrainedModels:
    cloud: CloudModelState
    edge: Detector
    cloud_loss: list[float]
    edge_loss: list[float]


def pretrain(source: DomainDataset, model_cfg: ModelConfig, edge_cfg: ModelConfig, cfg: TrainConfig, seed: int) -> PretrainedModels:
    """Source-only training of the cloud model and the initial edge model."""
    if edge_cfg.adaptation_modules:
        raise ValueError("the edge model carries no adaptation modules")
    state = new_cloud_state(model_cfg, seed, cfg.disc_hidden)
    torch.manual_seed(seed + 1)
    edge = Detector(edge_cfg)
    if edge.num_parameters() >= state.detector.num_parameters():
        raise ValueError("edge model must be smaller than the cloud model")
    labels = source.truth()
    cloud_loss = _train_with_drop(state.detector, source.images, labels, cfg.pretrain_epochs, cfg.pretrain_lr,
                                  seed, cfg, "pretrain-cloud")
    edge_loss = _train_with_drop(edge, source.images, labels, cfg.edge_pretrain_epochs, cfg.edge_pretrain_lr,
                                 seed, cfg, "pretrain-edge")
    return PretrainedModels(state, edge, cloud_loss, edge_loss)


def _train_with_drop(model, images, labels, epochs, lr, seed, cfg: TrainConfig, tag: str) -> list[float]:
    drop = min(cfg.pretrain_lr_drop_epochs, epochs)
    hist = train_supervised(model, images, labels, epochs - drop, lr, seed, cfg, tag=tag)
    return hist + train_supervised(model, images, labels, drop, lr / 10, seed, cfg, tag=tag + "-drop")


def run_collaboration_cycle(
    source: DomainDataset,
    streams: list[TargetStream],
    models: PretrainedModels,
    cfg: TrainConfig,
    seed: int,
    on_cycle=None,
) -> list[CycleReport]:
    """adapt -> pseudo-label -> retrain edge -> evaluate, once per stream.

    ``models`` is updated in place, so later cycles start from the models
    produced by earlier ones. ``on_cycle(report, models)`` is called after
    every cycle.
    """
    if not streams:
        raise ValueError("at least one cycle is required")
    reports = []
    inference_flags = cfg.flags if cfg.adapt else Flags(False, False, False)
    for stream in streams:
        cycle = models.cloud.cycle
        losses: list[float] = []
        if cfg.adapt:
            models.cloud, losses = adapt_cloud_model(source, stream.adapt, models.cloud, cfg, seed + 7919 * cycle)
        else:
            models.cloud.cycle += 1
        pseudo, kept = generate_pseudo_labels(models.cloud, stream.adapt, cfg.adv.tau, inference_flags)
        pl_map = evaluate_map(kept, stream.adapt.truth(), cfg.eval_iou)
        retrain_edge_model(models.edge, stream.adapt.images, pseudo, cfg, seed + 7919 * cycle)
        edge_dets = predict(models.edge, stream.evaluation.images)
        edge_map = evaluate_map(edge_dets, stream.evaluation.truth(), cfg.eval_iou)
        report = CycleReport(
            cycle=cycle + 1,
            stream=stream.spec.name,
            pseudo_label_map=pl_map,
            edge_map=edge_map,
            n_pseudo_labels=sum(len(lb) for _, lb in pseudo),
            adapted=cfg.adapt,
            dqfa=cfg.flags.dqfa if cfg.adapt else False,
            tiafa=cfg.flags.tiafa if cfg.adapt else False,
            vpg=cfg.flags.vpg if cfg.adapt else False,
            seed=seed,
            adapt_loss=losses,
            cloud_hash=parameter_hash(models.cloud.detector)[:16],
            edge_hash=parameter_hash(models.edge)[:16],
        )
        log.info("cycle %d %s: pseudo-label mAP %.2f, edge mAP %.2f", report.cycle, report.stream,
                 pl_map, edge_map)
        reports.append(report)
        if on_cycle is not None:
            on_cycle(report, models)
    return reports
