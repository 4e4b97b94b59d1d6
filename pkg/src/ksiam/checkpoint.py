"""Model checkpoints as safetensors files with the run configuration in the header."""
from __future__ import annotations

import json
import os
from pathlib import Path

from safetensors import SafetensorError, safe_open
from safetensors.torch import load_file, save_file
from torch import nn

from .config import build_train_config, config_hash, format_config, parse_config_text
from .errors import DataError
from .training import TrainConfig, new_model

FORMAT_VERSION = "1"


def save_checkpoint(model: nn.Module, path: str | os.PathLike, config: TrainConfig,
                    pipeline: str | None = None) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    enc = model.encoder
    meta = {
        "format_version": FORMAT_VERSION,
        "kind": model.kind,
        "pipeline": pipeline or model.kind,
        "heads": json.dumps(list(model.head_names)),
        "n_heads": str(model.n_heads),
        "feature_dim": str(model.feature_dim),
        "encoder_id": enc.encoder_id,
        "encoder_config": json.dumps(enc.config(), sort_keys=True),
        "config": format_config(config),
        "config_hash": config_hash(config),
    }
    state = {k: v.detach().contiguous() for k, v in model.state_dict().items()}
    save_file(state, str(p), metadata=meta)
    return p


def read_metadata(path: str | os.PathLike) -> dict[str, str]:
    try:
        with safe_open(str(path), framework="pt") as f:
            return dict(f.metadata() or {})
    except (OSError, ValueError, SafetensorError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None


def load_checkpoint(path: str | os.PathLike) -> tuple[nn.Module, TrainConfig, dict[str, str]]:
    """Rebuild the model described by the header and load its weights (evaluation mode)."""
    if not Path(path).is_file():
        raise DataError(f"checkpoint not found: {path}")
    meta = read_metadata(path)
    if meta.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint format {meta.get('format_version')!r}")
    config = build_train_config(parse_config_text(meta["config"], str(path)))
    heads = json.loads(meta["heads"])
    model = new_model(config, heads, meta["kind"])
    model.load_state_dict(load_file(str(path)))
    model.eval()
    return model, config, meta
