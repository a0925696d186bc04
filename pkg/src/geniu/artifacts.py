"""Bundle persistence: model, noise bank, and generator directories.

A bundle is a directory holding manifest.json plus one raw tensor file
per array (tensor_engine format). Manifests carry no timestamps, so a
rerun under the same seed produces byte-identical bundles.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .classifier import ArchSpec, ModelParams
from .errors import ArtifactError
from .generator import GeneratorParams, GeneratorSpec
from .noise import NoiseBank
from .tensor import Tensor, read_tensor, write_tensor

MANIFEST = "manifest.json"


def _write_manifest(directory: Path, payload: dict) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / MANIFEST, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_manifest(directory, kind: str) -> dict:
    path = Path(directory) / MANIFEST
    if not path.is_file():
        raise ArtifactError(f"{directory}: no {MANIFEST}; not a bundle")
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("kind") != kind:
        raise ArtifactError(
            f"{directory}: bundle kind {payload.get('kind')!r}, expected {kind!r}"
        )
    return payload


def _tensor_path(directory: Path, name: str) -> Path:
    return Path(directory) / f"{name}.bin"


def save_model(directory, model: ModelParams, extra: dict = None) -> None:
    directory = Path(directory)
    payload = {
        "kind": "model",
        "arch": model.arch.to_dict(),
        "params": sorted(model.params),
    }
    if extra:
        payload["extra"] = extra
    _write_manifest(directory, payload)
    for name, tensor in model.params.items():
        write_tensor(_tensor_path(directory, name), tensor.data)


def load_model(directory) -> ModelParams:
    payload = _read_manifest(directory, "model")
    arch = ArchSpec.from_dict(payload["arch"])
    params = {}
    for name in payload["params"]:
        path = _tensor_path(directory, name)
        if not path.is_file():
            raise ArtifactError(f"{directory}: missing tensor file {path.name}")
        params[name] = Tensor(read_tensor(path), requires_grad=True)
    return ModelParams(arch=arch, params=params)


def save_noise_bank(directory, bank: NoiseBank) -> None:
    directory = Path(directory)
    _write_manifest(directory, {
        "kind": "noise_bank",
        "num_classes": bank.num_classes,
        "trained_at_epoch": bank.trained_at_epoch,
        "classifier_fingerprint": bank.classifier_fingerprint,
    })
    for k in range(bank.num_classes):
        write_tensor(_tensor_path(directory, f"z_{k}"), bank.noises[k])


def load_noise_bank(directory) -> NoiseBank:
    payload = _read_manifest(directory, "noise_bank")
    k = int(payload["num_classes"])
    if k < 1:
        raise ArtifactError(f"{directory}: noise bank holds no classes")
    noises = []
    for i in range(k):
        path = _tensor_path(directory, f"z_{i}")
        if not path.is_file():
            raise ArtifactError(f"{directory}: missing tensor file {path.name}")
        noises.append(read_tensor(path))
    return NoiseBank(
        noises=np.stack(noises),
        trained_at_epoch=int(payload["trained_at_epoch"]),
        classifier_fingerprint=payload["classifier_fingerprint"],
    )


def save_generator(directory, gen: GeneratorParams) -> None:
    directory = Path(directory)
    _write_manifest(directory, {
        "kind": "generator",
        "spec": gen.spec.to_dict(),
        "trained_steps": gen.trained_steps,
        "params": sorted(gen.params),
    })
    for name, tensor in gen.params.items():
        write_tensor(_tensor_path(directory, name), tensor.data)


def load_generator(directory) -> GeneratorParams:
    payload = _read_manifest(directory, "generator")
    spec = GeneratorSpec.from_dict(payload["spec"])
    params = {}
    for name in payload["params"]:
        path = _tensor_path(directory, name)
        if not path.is_file():
            raise ArtifactError(f"{directory}: missing tensor file {path.name}")
        params[name] = Tensor(read_tensor(path), requires_grad=True)
    return GeneratorParams(spec=spec, params=params,
                           trained_steps=int(payload["trained_steps"]))


def dir_nbytes(directory) -> int:
    directory = Path(directory)
    if not directory.is_dir():
        raise ArtifactError(f"{directory}: not a directory")
    return sum(p.stat().st_size for p in directory.rglob("*") if p.is_file())


def bundle_fingerprint(directory) -> str:
    """sha256 over sorted relative paths and file contents."""
    import hashlib

    directory = Path(directory)
    digest = hashlib.sha256()
    for path in sorted(directory.rglob("*")):
        if path.is_file():
            digest.update(str(path.relative_to(directory)).encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()
