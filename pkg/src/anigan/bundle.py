"""Self-contained generator bundles for serving.

A bundle directory holds::

    generator.pt        generator state_dict
    architecture.json   layer manifest (enough to rebuild the network)
    taxonomy.json       attribute taxonomy
    prior.json          empirical attribute prior used to complete requests
    bundle.json         per-file sha256, model_version, size report

``model_version`` is the sha256 of the sorted per-file hashes, so two exports
of the same weights and metadata get the same version.
"""

from __future__ import annotations

import difflib
import hashlib
import io
import json
import os
from dataclasses import dataclass
from pathlib import Path

import torch

from .errors import BundleIntegrityError, ValidationError
from .nets import architecture_manifest, build_from_manifest
from .tagspace import LabelPrior, TagTaxonomy, default_taxonomy

PAYLOAD_FILES = ("generator.pt", "architecture.json", "taxonomy.json", "prior.json")


def _json_bytes(doc) -> bytes:
    return (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode()


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def size_report(state_dict: dict) -> dict:
    per = {k: int(v.numel() * v.element_size()) for k, v in state_dict.items()}
    return {"total_bytes": sum(per.values()), "tensors": per}


@dataclass
class ExportBundle:
    directory: Path
    model_version: str
    generator: torch.nn.Module
    taxonomy: TagTaxonomy
    prior: LabelPrior
    architecture: dict
    size: dict


def _taxonomy_diff(expected: TagTaxonomy, found: dict) -> str:
    a = json.dumps(expected.to_manifest()["names"], indent=1).splitlines()
    b = json.dumps(found.get("names", []), indent=1).splitlines()
    return "\n".join(difflib.unified_diff(a, b, "expected", "checkpoint", lineterm=""))


def write_bundle(
    generator: torch.nn.Module,
    out_dir: str | os.PathLike,
    prior: LabelPrior,
    taxonomy: TagTaxonomy | None = None,
    extra: dict | None = None,
) -> ExportBundle:
    taxonomy = taxonomy or prior.taxonomy
    if prior.kind != "empirical":
        raise ValidationError("bundles ship an empirical prior")
    if prior.taxonomy.version != taxonomy.version:
        raise ValidationError(f"prior taxonomy {prior.taxonomy.version} != {taxonomy.version}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().cpu().contiguous() for k, v in generator.state_dict().items()}
    buf = io.BytesIO()
    torch.save(state, buf)
    arch = architecture_manifest(generator)
    arch["taxonomy_version"] = taxonomy.version
    tax_doc = taxonomy.to_manifest()
    tax_doc.pop("reference_counts", None)
    payload = {
        "generator.pt": buf.getvalue(),
        "architecture.json": _json_bytes(arch),
        "taxonomy.json": _json_bytes(tax_doc),
        "prior.json": _json_bytes(prior.to_dict()),
    }
    hashes = {name: _sha(data) for name, data in payload.items()}
    version = _sha("".join(f"{k}:{hashes[k]}\n" for k in sorted(hashes)).encode())
    sizes = size_report(state)
    sizes["file_bytes"] = {k: len(v) for k, v in payload.items()}
    meta = {"model_version": version, "files": hashes, "size": sizes, "source": extra or {}}
    for name, data in payload.items():
        (out_dir / name).write_bytes(data)
    (out_dir / "bundle.json").write_bytes(_json_bytes(meta))
    return ExportBundle(out_dir, version, generator, taxonomy, prior, arch, sizes)


def export_checkpoint(
    checkpoint: str | os.PathLike,
    out_dir: str | os.PathLike,
    manifest=None,
    prior: LabelPrior | None = None,
    taxonomy: TagTaxonomy | None = None,
) -> ExportBundle:
    """Package a training checkpoint's generator for serving.

    The empirical prior comes from ``prior`` if given, else from the retained
    records of ``manifest``, else from the checkpoint's own prior if that is
    empirical, else from the bundled reference counts.
    """
    taxonomy = taxonomy or default_taxonomy()
    payload = torch.load(checkpoint, map_location="cpu", weights_only=False)
    ckpt_tax = payload.get("taxonomy_version")
    if ckpt_tax != taxonomy.version:
        raise ValidationError(
            f"checkpoint taxonomy {ckpt_tax!r} does not match {taxonomy.version!r}\n"
            + _taxonomy_diff(taxonomy, {"names": payload.get("taxonomy_names") or []})
        )
    if manifest is not None and manifest.taxonomy_version != taxonomy.version:
        raise ValidationError(
            f"manifest taxonomy {manifest.taxonomy_version!r} does not match checkpoint {ckpt_tax!r}"
        )
    if prior is None:
        if manifest is not None and manifest.retained:
            import numpy as np

            prior = LabelPrior.from_tags(np.array([r.tags for r in manifest.retained]), taxonomy)
        elif payload.get("prior") and payload["prior"].get("kind") == "empirical":
            prior = LabelPrior.from_dict(payload["prior"], taxonomy)
        else:
            prior = LabelPrior.reference()
    G = build_from_manifest(payload["generator_arch"])
    G.load_state_dict(payload["generator"])
    G.eval()
    return write_bundle(G, out_dir, prior, taxonomy, {"step": payload["step"]})


def load_bundle(directory: str | os.PathLike) -> ExportBundle:
    """Load and integrity-check a bundle; any hash mismatch raises."""
    directory = Path(directory)
    try:
        meta = json.loads((directory / "bundle.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise BundleIntegrityError(f"unreadable bundle.json in {directory}: {exc}") from exc
    blobs = {}
    for name in PAYLOAD_FILES:
        path = directory / name
        if not path.exists():
            raise BundleIntegrityError(f"bundle is missing {name}")
        blobs[name] = path.read_bytes()
        if _sha(blobs[name]) != meta["files"].get(name):
            raise BundleIntegrityError(f"checksum mismatch for {name}")
    version = _sha("".join(f"{k}:{meta['files'][k]}\n" for k in sorted(meta["files"])).encode())
    if version != meta.get("model_version"):
        raise BundleIntegrityError("model_version does not match file hashes")
    taxonomy = TagTaxonomy.from_manifest(json.loads(blobs["taxonomy.json"]))
    prior = LabelPrior.from_dict(json.loads(blobs["prior.json"]), taxonomy)
    arch = json.loads(blobs["architecture.json"])
    G = build_from_manifest(arch)
    G.load_state_dict(torch.load(io.BytesIO(blobs["generator.pt"]), map_location="cpu", weights_only=True))
    G.eval()
    return ExportBundle(directory, version, G, taxonomy, prior, arch, meta.get("size", {}))
