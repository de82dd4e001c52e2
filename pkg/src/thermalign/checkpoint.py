"""Checkpoint serialization: named float32 arrays behind a text index.

A checkpoint is a directory holding

    index.txt    one line per array: name<TAB>dim0,dim1,...<TAB>blob file
    arrays/*.bin little-endian float32 blobs, C order
    config.txt   flat key=value snapshot of the training configuration
    state.txt    iteration counter and format version

All model parameters and buffers of both branches, the shared heads,
the discriminators, and the optimizer state are stored this way, so a
save -> load -> save round trip is byte-identical.
"""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data import read_keyvalue, write_keyvalue

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


def write_arrays(directory: str | Path, arrays: dict[str, np.ndarray]) -> None:
    directory = Path(directory)
    blob_dir = directory / "arrays"
    blob_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f4")
        blob = f"arrays/{name}.bin"
        # ascontiguousarray promotes 0-d arrays, so record dims first.
        dims = ",".join(str(d) for d in arr.shape)
        (directory / blob).write_bytes(np.ascontiguousarray(arr).tobytes())
        lines.append(f"{name}\t{dims}\t{blob}")
    (directory / "index.txt").write_text("\n".join(lines) + "\n")


def read_arrays(directory: str | Path) -> dict[str, np.ndarray]:
    directory = Path(directory)
    index = directory / "index.txt"
    if not index.is_file():
        raise FileNotFoundError(f"checkpoint index not found: {index}")
    arrays: dict[str, np.ndarray] = {}
    for line in index.read_text().splitlines():
        if not line.strip():
            continue
        name, dims, blob = line.split("\t")
        shape = tuple(int(d) for d in dims.split(",")) if dims else ()
        data = np.frombuffer((directory / blob).read_bytes(), dtype="<f4")
        arrays[name] = data.reshape(shape)
    return arrays


def _module_arrays(module: nn.Module, prefix: str) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.{key}": tensor.detach().cpu().numpy()
        for key, tensor in module.state_dict().items()
    }


def _optimizer_arrays(
    optimizer: torch.optim.Optimizer, named_params: list[tuple[str, torch.Tensor]]
) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    by_id = {id(p): name for name, p in named_params}
    for group in optimizer.param_groups:
        for param in group["params"]:
            state = optimizer.state.get(param)
            if not state:
                continue
            name = by_id[id(param)]
            for key, value in state.items():
                tensor = value if torch.is_tensor(value) else torch.tensor(float(value))
                arrays[f"optim.{name}.{key}"] = tensor.detach().cpu().numpy()
    return arrays


def save_checkpoint(
    directory: str | Path,
    modules: dict[str, nn.Module],
    config_values: dict,
    iteration: int,
    optimizer: torch.optim.Optimizer | None = None,
    optimizer_params: list[tuple[str, torch.Tensor]] | None = None,
    phase: str = "init",
) -> Path:
    """Write a full checkpoint bundle; returns the directory path."""
    directory = Path(directory)
    arrays: dict[str, np.ndarray] = {}
    for prefix, module in modules.items():
        arrays.update(_module_arrays(module, prefix))
    if optimizer is not None and optimizer_params:
        arrays.update(_optimizer_arrays(optimizer, optimizer_params))
    write_arrays(directory, arrays)
    write_keyvalue(directory / "config.txt", config_values)
    write_keyvalue(
        directory / "state.txt",
        {"format_version": FORMAT_VERSION, "iteration": iteration, "phase": phase},
    )
    return directory


def load_modules(directory: str | Path, modules: dict[str, nn.Module]) -> dict[str, np.ndarray]:
    """Load stored arrays into the given modules, casting dtypes back.

    Returns the leftover arrays (e.g. optimizer state) that did not
    belong to any module.
    """
    arrays = read_arrays(directory)
    leftovers = dict(arrays)
    for prefix, module in modules.items():
        state = module.state_dict()
        new_state = {}
        for key, tensor in state.items():
            name = f"{prefix}.{key}"
            if name not in arrays:
                raise KeyError(f"checkpoint is missing array {name}")
            value = arrays[name]
            if tuple(value.shape) != tuple(tensor.shape):
                raise ValueError(
                    f"shape mismatch for {name}: checkpoint {value.shape} vs model {tuple(tensor.shape)}"
                )
            new_state[key] = torch.from_numpy(value.copy()).to(tensor.dtype)
            leftovers.pop(name, None)
        module.load_state_dict(new_state)
    return leftovers


def load_optimizer_state(
    leftovers: dict[str, np.ndarray],
    optimizer: torch.optim.Optimizer,
    named_params: list[tuple[str, torch.Tensor]],
) -> None:
    """Rebuild per-parameter optimizer state from leftover arrays."""
    by_name = dict(named_params)
    for array_name, value in leftovers.items():
        if not array_name.startswith("optim."):
            continue
        body = array_name[len("optim."):]
        param_name, key = body.rsplit(".", 1)
        param = by_name.get(param_name)
        if param is None:
            raise KeyError(f"optimizer state {array_name} has no matching parameter")
        state = optimizer.state.setdefault(param, {})
        if key == "step":
            state[key] = torch.tensor(float(value))
        else:
            state[key] = torch.from_numpy(value.copy()).to(param.dtype)


def read_state(directory: str | Path) -> dict[str, str]:
    return read_keyvalue(Path(directory) / "state.txt")


def read_config(directory: str | Path) -> dict[str, str]:
    return read_keyvalue(Path(directory) / "config.txt")


def import_external_arrays(
    module: nn.Module,
    directory: str | Path,
    mapping_path: str | Path,
    prefix: str = "",
) -> int:
    """Copy arrays from an external checkpoint manifest into a module.

    The mapping file holds one "source_name<TAB>target_name" line per
    array to import; target names address the module's state dict.
    Returns the number of imported arrays.
    """
    arrays = read_arrays(directory)
    state = module.state_dict()
    imported = 0
    for raw in Path(mapping_path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        src, dst = line.split("\t")
        if prefix and dst.startswith(prefix):
            dst = dst[len(prefix):]
        if src not in arrays:
            raise KeyError(f"external checkpoint has no array {src}")
        if dst not in state:
            raise KeyError(f"model has no parameter slot {dst}")
        value = arrays[src]
        if tuple(value.shape) != tuple(state[dst].shape):
            raise ValueError(
                f"shape mismatch importing {src} -> {dst}: {value.shape} vs {tuple(state[dst].shape)}"
            )
        state[dst] = torch.from_numpy(value.copy()).to(state[dst].dtype)
        imported += 1
    module.load_state_dict(state)
    logger.info("imported %d arrays from %s", imported, directory)
    return imported
