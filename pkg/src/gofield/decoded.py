"""Decoded groups of frames stored as ``.npz`` archives.

The archive keeps the dequantized float32 grids, the network weights and the
entropy-model parameters exactly as the decoder produced them, so rendering
from the archive matches rendering from the ``.gof`` bit for bit.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .codec.bitstream import network_from_bytes, network_to_bytes
from .entropy import DEFAULT_FILTERS, P_MIN, EntropyModel
from .errors import FormatError
from .field import FeatureGrid, FrameRepresentation, GofRepresentation, MultiResBasis

_FORMAT = "gofield-decoded"


def save_decoded(gof: GofRepresentation, path, q: float | None = None) -> Path:
    path = Path(path)
    arrays = {}
    for i, fr in enumerate(gof.frames):
        for lvl, g in enumerate(fr.basis.levels):
            arrays[f"f{i}_level{lvl}"] = g.data.detach().cpu().numpy()
        arrays[f"f{i}_coeff"] = fr.coeff.data.detach().cpu().numpy()
        for m_i, m in enumerate(gof.models[i] if gof.models else []):
            arrays[f"f{i}_model{m_i}"] = np.frombuffer(m.to_bytes(), dtype=np.uint8)
    arrays["net"] = np.frombuffer(network_to_bytes(gof.net), dtype=np.uint8)
    meta = {
        "format": _FORMAT,
        "q": q,
        "first_frame": gof.first_frame,
        "kinds": [fr.kind for fr in gof.frames],
        "levels": len(gof.keyframe.basis),
        "bounds": [list(gof.keyframe.coeff.bounds[0]), list(gof.keyframe.coeff.bounds[1])],
        "hidden": list(gof.net.hidden),
        "sh_degree": gof.net.sh_degree,
        "model_channels": [m.channels for m in gof.models[0]] if gof.models else [],
        "filters": list(gof.models[0][0].filters) if gof.models else list(DEFAULT_FILTERS),
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    return path


def load_decoded(path) -> GofRepresentation:
    with np.load(Path(path)) as z:
        if "meta" not in z:
            raise FormatError(f"{path} is not a decoded GOF archive")
        meta = json.loads(z["meta"].tobytes())
        if meta.get("format") != _FORMAT:
            raise FormatError(f"{path} is not a decoded GOF archive")
        bounds = (tuple(meta["bounds"][0]), tuple(meta["bounds"][1]))
        frames, models = [], []
        for i, kind in enumerate(meta["kinds"]):
            levels = tuple(
                FeatureGrid(torch.from_numpy(z[f"f{i}_level{l}"].copy()), bounds) for l in range(meta["levels"])
            )
            coeff = FeatureGrid(torch.from_numpy(z[f"f{i}_coeff"].copy()), bounds)
            frames.append(FrameRepresentation(kind, MultiResBasis(levels), coeff, i + 1))
            models.append([
                EntropyModel.from_bytes(z[f"f{i}_model{m}"].tobytes(), c, tuple(meta["filters"]), P_MIN, torch.float32)
                for m, c in enumerate(meta["model_channels"])
            ])
        net = network_from_bytes(z["net"].tobytes(), coeff.channels, tuple(meta["hidden"]), meta["sh_degree"])
    return GofRepresentation(frames[0], frames[1:], net, models if meta["model_channels"] else [],
                             meta["first_frame"])
