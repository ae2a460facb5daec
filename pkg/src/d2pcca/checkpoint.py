"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    8 bytes   magic  b"D2PCCAck"
    u32       format version
    u64       header length in bytes
    header    UTF-8 JSON: kind, variant, seed, layout, tensor table, extras
    payload   float64 little-endian tensors, in tensor-table order

The tensor table gives every tensor's name, shape and element offset, so a
file can be read without the code that wrote it.  :func:`dump_json` writes the
same content as readable JSON for debugging.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from d2pcca import lds
from d2pcca.errors import CheckpointError
from d2pcca.flows import attach_flow
from d2pcca.model import D2pccaModel, LatentLayout, NetWidths
from d2pcca.training import AdamState, EpochRecord, TrainState

MAGIC = b"D2PCCAck"
VERSION = 1
_DTYPE = np.dtype("<f8")


@dataclass
class Checkpoint:
    header: dict
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.header["kind"]

    @property
    def variant(self) -> str:
        return self.header["variant"]


def write(path, ckpt: Checkpoint) -> None:
    table, blobs, offset = [], [], 0
    for name, arr in ckpt.arrays.items():
        a = np.ascontiguousarray(arr, dtype=_DTYPE)
        table.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.size
    header = dict(ckpt.header)
    header["tensors"] = table
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<IQ", VERSION, len(raw)))
            fh.write(raw)
            for b in blobs:
                fh.write(b)
        tmp.replace(path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc


def read(path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, n = struct.unpack("<IQ", blob[8:20])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(blob[20: 20 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    payload = np.frombuffer(blob[20 + n:], dtype=_DTYPE)
    arrays = {}
    for entry in header.pop("tensors"):
        size = int(np.prod(entry["shape"], dtype=int))
        start = entry["offset"]
        if start + size > payload.size:
            raise CheckpointError(f"{path}: truncated payload at tensor {entry['name']}")
        arrays[entry["name"]] = payload[start: start + size].reshape(entry["shape"]).copy()
    return Checkpoint(header, arrays)


def dump_json(path, ckpt: Checkpoint) -> None:
    doc = dict(ckpt.header)
    doc["arrays"] = {k: v.tolist() for k, v in ckpt.arrays.items()}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


# ---------------------------------------------------------------------------
# models


def model_checkpoint(model: D2pccaModel, variant: str, seed: int, state: TrainState | None = None,
                     extra: dict | None = None) -> Checkpoint:
    flow = model.flow
    header = {
        "kind": "d2pcca",
        "variant": variant,
        "seed": int(seed),
        "layout": model.layout.to_dict(),
        "widths": {
            "transition_hidden": model.widths.transition_hidden,
            "emission_hidden": model.widths.emission_hidden,
            "encoder_hidden": model.widths.encoder_hidden,
        },
        "transition": model.transition_variant,
        "flow": None if flow is None else {"layers": len(flow.layers), "hidden": flow.layers[0].hidden},
        "extra": extra or {},
    }
    arrays = {f"param.{k}": v for k, v in model.state_dict().items()}
    if state is not None:
        names = [n for n, _ in model.named_parameters()]
        header["train"] = {
            "epoch": state.epoch,
            "adam_step": state.adam.step,
            "rng_state": state.rng_state,
            "best_val": None if not np.isfinite(state.best_val) else state.best_val,
            "best_epoch": state.best_epoch,
            "trace": [vars(r) for r in state.trace],
        }
        for n, m, v in zip(names, state.adam.m, state.adam.v):
            arrays[f"adam.m.{n}"] = m
            arrays[f"adam.v.{n}"] = v
        if state.best_params is not None:
            arrays.update({f"best.{k}": v for k, v in state.best_params.items()})
    return Checkpoint(header, arrays)


def restore_model(ckpt: Checkpoint, which: str = "param") -> D2pccaModel:
    """Rebuild the model; ``which="best"`` loads the best-validation weights when stored."""
    if ckpt.kind != "d2pcca":
        raise CheckpointError(f"checkpoint holds a {ckpt.kind} model, not d2pcca")
    h = ckpt.header
    model = D2pccaModel(
        LatentLayout.from_dict(h["layout"]), 0, transition_variant=h["transition"], widths=NetWidths(**h["widths"])
    )
    if h["flow"] is not None:
        attach_flow(model, h["flow"]["layers"], h["flow"]["hidden"], rng=0)
    prefix = f"{which}."
    state = {k[len(prefix):]: v for k, v in ckpt.arrays.items() if k.startswith(prefix)}
    if not state:
        raise CheckpointError(f"checkpoint has no {which!r} weights")
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint does not match the model: {exc}") from exc
    return model


def restore_state(ckpt: Checkpoint, model: D2pccaModel) -> TrainState:
    t = ckpt.header.get("train")
    if t is None:
        raise CheckpointError("checkpoint carries no training state to resume from")
    names = [n for n, _ in model.named_parameters()]
    try:
        m = [ckpt.arrays[f"adam.m.{n}"] for n in names]
        v = [ckpt.arrays[f"adam.v.{n}"] for n in names]
    except KeyError as exc:
        raise CheckpointError(f"optimizer state missing for {exc}") from exc
    best = {k[5:]: a for k, a in ckpt.arrays.items() if k.startswith("best.")} or None
    return TrainState(
        epoch=t["epoch"],
        adam=AdamState(t["adam_step"], m, v),
        rng_state=t["rng_state"],
        best_val=-np.inf if t["best_val"] is None else t["best_val"],
        best_epoch=t["best_epoch"],
        best_params=best,
        trace=[EpochRecord(**r) for r in t["trace"]],
    )


def linear_checkpoint(params: lds.DpccaParams, variant: str, seed: int, set_names=(), extra: dict | None = None) -> Checkpoint:
    header = {
        "kind": "dpcca",
        "variant": variant,
        "seed": int(seed),
        "layout": LatentLayout(
            params.latent_dims[0], params.latent_dims[1:], params.obs_dims, tuple(set_names)
        ).to_dict(),
        "extra": extra or {},
    }
    return Checkpoint(header, {f"lds.{k}": v for k, v in params.to_arrays().items()})


def restore_linear(ckpt: Checkpoint) -> lds.DpccaParams:
    if ckpt.kind != "dpcca":
        raise CheckpointError(f"checkpoint holds a {ckpt.kind} model, not dpcca")
    return lds.DpccaParams.from_arrays({k[4:]: v for k, v in ckpt.arrays.items() if k.startswith("lds.")})
