"""Model checkpoints: a directory of raw parameters plus two text manifests.

    params.bin        all parameters, float32 little-endian, in named_parameters order
    params.manifest   `name = d0,d1,...` per tensor, same order
    config.manifest   McfConfig keys and the init seed
"""

from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import structlog
from pydantic import ValidationError

from mcf_fusion.api.dto import McfConfig
from mcf_fusion.core.config import format_key_value, read_key_value_file
from mcf_fusion.core.errors import CheckpointError, ConfigurationError
from mcf_fusion.services.bundle import atomic_write
from mcf_fusion.services.model import McfModel

logger = structlog.get_logger(__name__)

PARAMS_FILE = "params.bin"
PARAMS_MANIFEST = "params.manifest"
CONFIG_MANIFEST = "config.manifest"


def save_checkpoint(model: McfModel, directory: Path, timestamp: bool = True) -> Path:
    directory = Path(directory)
    names, shapes, blobs = [], [], []
    for name, param in model.named_parameters():
        names.append(name)
        shapes.append(param.shape)
        blobs.append(np.ascontiguousarray(param.data, dtype="<f4").tobytes())

    config_entries = {**model.config.model_dump(mode="json"), "seed": model.seed}
    config_text = format_key_value(config_entries)
    if timestamp:
        created = datetime.now(timezone.utc).isoformat(timespec="seconds")
        config_text = f"# created {created}\n" + config_text

    atomic_write(directory / PARAMS_FILE, b"".join(blobs))
    atomic_write(directory / PARAMS_MANIFEST, format_key_value(dict(zip(names, shapes))))
    atomic_write(directory / CONFIG_MANIFEST, config_text)
    logger.info("Saved checkpoint", path=str(directory), tensors=len(names))
    return directory


def _parse_shape(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.split(",") if part.strip())


def load_checkpoint(directory: Path) -> McfModel:
    directory = Path(directory)
    for name in (PARAMS_FILE, PARAMS_MANIFEST, CONFIG_MANIFEST):
        if not (directory / name).exists():
            raise CheckpointError(f"checkpoint is missing {name}", {"path": str(directory)})

    try:
        entries = read_key_value_file(directory / CONFIG_MANIFEST)
        seed = int(entries.pop("seed", "0"))
        config = McfConfig(**{k: (v if v != "" else None) for k, v in entries.items()})
        layout = {
            name: _parse_shape(shape)
            for name, shape in read_key_value_file(directory / PARAMS_MANIFEST).items()
        }
    except (ValidationError, ValueError, ConfigurationError) as e:
        raise CheckpointError(f"unreadable checkpoint manifest: {e}", {"path": str(directory)}) from e

    model = McfModel(config, seed=seed)
    expected = [(name, p.shape) for name, p in model.named_parameters()]
    if [(name, layout.get(name)) for name, _ in expected] != expected or len(layout) != len(expected):
        raise CheckpointError(
            "parameter manifest does not match the configured architecture",
            {"path": str(directory)},
        )

    data = (directory / PARAMS_FILE).read_bytes()
    total = sum(int(np.prod(shape)) for _, shape in expected)
    if len(data) != 4 * total:
        raise CheckpointError(
            f"{PARAMS_FILE} holds {len(data)} bytes, manifest declares {total} float32 values",
            {"path": str(directory)},
        )
    raw = np.frombuffer(data, dtype="<f4")

    state, offset = {}, 0
    for name, shape in expected:
        size = int(np.prod(shape))
        state[name] = raw[offset:offset + size].reshape(shape).astype(np.float32)
        offset += size
    model.load_state_dict(state)
    logger.info("Loaded checkpoint", path=str(directory), tensors=len(state))
    return model
