"""Model snapshots: a zip of raw little-endian float32 tensors plus a JSON manifest."""
from __future__ import annotations

import json
import zipfile
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .alignment import DomainDiscriminators
from .detector import Detector, ModelConfig
from .pipeline import CloudModelState, stable_hash

FORMAT_VERSION = 1
# fixed timestamp so identical models give byte-identical archives
_ZIP_DATE = (2020, 1, 1, 0, 0, 0)


class SnapshotError(ValueError):
    pass


def _write(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, data)


def _group_entries(group: str, module: nn.Module) -> dict[str, tuple[list[int], bytes]]:
    out = {}
    for name, t in module.state_dict().items():
        arr = t.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4")
        out[f"{group}/{name}"] = (list(arr.shape), arr.tobytes())
    return out


def save_snapshot(
    path: str | Path,
    cloud: CloudModelState,
    edge: Detector | None = None,
    extra: dict | None = None,
) -> Path:
    """Write cloud detector, discriminators and (optionally) the edge model."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = _group_entries("cloud", cloud.detector)
    entries.update(_group_entries("discriminators", cloud.discriminators))
    if edge is not None:
        entries.update(_group_entries("edge", edge))
    manifest = {
        "format": FORMAT_VERSION,
        "cycle": cloud.cycle,
        "cloud_config": cloud.detector.cfg.to_dict(),
        "config_hash": stable_hash(cloud.detector.cfg.to_dict()),
        "disc_hidden": cloud.discriminators.enc_global.fc1.out_features,
        "edge_config": None if edge is None else edge.cfg.to_dict(),
        "tensors": {key: {"shape": shape, "dtype": "<f4"} for key, (shape, _) in entries.items()},
        "extra": extra or {},
    }
    if cloud.detector.cfg.adaptation_modules:
        manifest["bank"] = {"beta": cloud.detector.vpg.bank.beta}
    with zipfile.ZipFile(path, "w") as zf:
        _write(zf, "manifest.json", json.dumps(manifest, indent=2, sort_keys=True).encode())
        for key in sorted(entries):
            _write(zf, key + ".bin", entries[key][1])
    return path


def read_manifest(path: str | Path) -> dict:
    with zipfile.ZipFile(path) as zf:
        return json.loads(zf.read("manifest.json"))


def _load_group(zf: zipfile.ZipFile, manifest: dict, group: str, module: nn.Module) -> None:
    state = module.state_dict()
    prefix = group + "/"
    stored = {k[len(prefix):]: v for k, v in manifest["tensors"].items() if k.startswith(prefix)}
    missing = sorted(set(state) - set(stored))
    unexpected = sorted(set(stored) - set(state))
    if missing or unexpected:
        raise SnapshotError(f"{group}: missing {missing[:3]}, unexpected {unexpected[:3]}")
    loaded = {}
    for name, ref in state.items():
        shape = stored[name]["shape"]
        if list(ref.shape) != shape:
            raise SnapshotError(f"{group}/{name}: snapshot shape {shape} != model shape {list(ref.shape)}")
        raw = zf.read(f"{prefix}{name}.bin")
        if len(raw) != 4 * int(np.prod(shape, dtype=np.int64)):
            raise SnapshotError(f"{group}/{name}: {len(raw)} bytes do not match shape {shape}")
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape)
        loaded[name] = torch.from_numpy(arr.copy()).to(ref.dtype)
    module.load_state_dict(loaded)


def load_snapshot(
    path: str | Path,
    model_cfg: ModelConfig | None = None,
    edge_cfg: ModelConfig | None = None,
) -> tuple[CloudModelState, Detector | None]:
    """Rebuild the models from a snapshot, validating against ``model_cfg`` when given."""
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != FORMAT_VERSION:
            raise SnapshotError(f"unsupported snapshot format {manifest.get('format')}")
        stored_cfg = ModelConfig(**manifest["cloud_config"])
        if model_cfg is not None and stable_hash(model_cfg.to_dict()) != manifest["config_hash"]:
            raise SnapshotError("snapshot was written for a different model configuration")
        cfg = model_cfg or stored_cfg
        detector = Detector(cfg)
        discs = DomainDiscriminators(cfg.d_model, manifest["disc_hidden"])
        _load_group(zf, manifest, "cloud", detector)
        _load_group(zf, manifest, "discriminators", discs)
        if "bank" in manifest:
            detector.vpg.bank.beta = float(manifest["bank"]["beta"])
        edge = None
        if manifest.get("edge_config") is not None:
            stored_edge = ModelConfig(**manifest["edge_config"])
            if edge_cfg is not None and edge_cfg.to_dict() != stored_edge.to_dict():
                raise SnapshotError("snapshot edge model does not match the requested edge configuration")
            edge = Detector(edge_cfg or stored_edge)
            _load_group(zf, manifest, "edge", edge)
    state = CloudModelState(detector, discs, manifest["cycle"], manifest["config_hash"])
    state.check()
    return state, edge
