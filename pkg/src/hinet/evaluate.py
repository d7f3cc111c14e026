"""Patch-wise synthesis of whole slices/volumes and test-set evaluation."""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import torch

from . import data
from .data import CROP_SHAPE, PATCH_SIZE, Modality, Volume
from .errors import DataError
from .metrics import MetricsRecord, aggregate, image_metrics

log = logging.getLogger(__name__)


@torch.no_grad()
def predict(model, x1, x2, batch_size=16):
    """Run the generator in eval mode over stacks of 2-D inputs."""
    model.eval()
    x1 = np.asarray(x1, dtype=np.float32)
    x2 = np.asarray(x2, dtype=np.float32)
    out = []
    for i in range(0, len(x1), batch_size):
        a = torch.from_numpy(x1[i:i + batch_size, None])
        b = torch.from_numpy(x2[i:i + batch_size, None])
        out.append(model.synthesize(a, b)[:, 0].numpy())
    return np.concatenate(out) if out else np.zeros((0, *x1.shape[1:]), np.float32)


def synthesize_slice(model, s1, s2, size=PATCH_SIZE):
    """Four-patch synthesis of one cropped slice, overlap-averaged."""
    p1 = data.extract_patches(s1, size, s1.shape)
    p2 = data.extract_patches(s2, size, s2.shape)
    pred = predict(model, np.stack(p1.patches), np.stack(p2.patches))
    return data.stitch_patches(data.PatchSet(list(pred), p1.anchors, p1.parent_shape))


def synthesize_volume(model, v1, v2, crop=CROP_SHAPE):
    """Normalised, cropped sources -> stitched [-1, 1] prediction per slice."""
    size = model.cfg.input_size[0]
    a = data.center_crop(data.normalize_intensity(v1).data, crop)
    b = data.center_crop(data.normalize_intensity(v2).data, crop)
    patches1, patches2, anchors = [], [], None
    for s in range(a.shape[0]):
        p1 = data.extract_patches(a[s], size, crop)
        p2 = data.extract_patches(b[s], size, crop)
        patches1.extend(p1.patches)
        patches2.extend(p2.patches)
        anchors = p1.anchors
    pred = predict(model, np.stack(patches1), np.stack(patches2))
    n = len(anchors)
    return np.stack([
        data.stitch_patches(data.PatchSet(list(pred[s * n:(s + 1) * n]), anchors, crop))
        for s in range(a.shape[0])
    ])


def evaluate_samples(model, samples):
    """Metrics of whole-image samples (no patching), one record each."""
    pred = predict(model, np.stack([s.x1 for s in samples]), np.stack([s.x2 for s in samples]))
    return [MetricsRecord(s.subject_id, s.slice_index, **image_metrics(s.y, p)) for s, p in zip(samples, pred)]


def evaluate_dataset(model, index, subject_ids, sources, target, skip_background=False, crop=CROP_SHAPE):
    """Per-slice metrics on stitched crops.  Subjects lacking a modality
    are skipped and returned in the second element."""
    records, skipped = [], []
    for sid in subject_ids:
        missing = [m for m in (*sources, target) if not index.has(sid, m)]
        if missing:
            log.warning("subject %s lacks %s; skipped", sid, ", ".join(Modality(m).value for m in missing))
            skipped.append(sid)
            continue
        v1, v2, vy = (data.load_volume(index.path(sid, m), m, sid) for m in (*sources, target))
        pred = synthesize_volume(model, v1, v2, crop)
        truth = data.center_crop(data.normalize_intensity(vy).data, crop)
        for s in range(truth.shape[0]):
            if skip_background and np.all(truth[s] == truth[s].min()):
                continue
            try:
                m = image_metrics(truth[s], pred[s])
            except DataError as exc:
                log.warning("subject %s slice %d: %s", sid, s, exc)
                continue
            records.append(MetricsRecord(sid, s, **m))
    return records, skipped


def aggregate_evaluate(model, index, subject_ids, sources, target, task=None, per_subject=False, **kw):
    task = task or f"{'+'.join(Modality(m).value for m in sources)}→{Modality(target).value}"
    records, skipped = evaluate_dataset(model, index, subject_ids, sources, target, **kw)
    return aggregate(records, task, skipped, per_subject=per_subject), records


def synthesize_subject(model, subject_dir, sources, output_dir, target="synthetic", intensity_range=None,
                       ext=None, crop=CROP_SHAPE):
    """Synthesize the target volume for one subject directory.

    Sources are looked up as ``<subject_dir>/<modality>.*``.  The output
    keeps the first source's file format; [-1, 1] predictions are mapped
    back to ``intensity_range`` (default: the first source's raw range).
    """
    subject_dir = Path(subject_dir)
    paths = []
    for m in sources:
        m = Modality(m).value
        hits = sorted(p for p in subject_dir.glob(f"{m}.*") if p.name.split(".", 1)[0] == m)
        if not hits:
            raise DataError(f"source modality {m} not found in {subject_dir}")
        paths.append(hits[0])
    v1, v2 = (data.load_volume(p, m, subject_dir.name) for p, m in zip(paths, sources))
    pred = synthesize_volume(model, v1, v2, crop)
    rng = intensity_range or v1.intensity_range
    out = data.denormalize_intensity(pred, rng)
    if ext is None:
        ext = paths[0].name.split(".", 1)[1]
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    try:
        name = Modality(target).value
    except ValueError:
        name = str(target)
    path = output_dir / f"{name}.{ext}"
    data.save_volume(path, Volume(subject_dir.name, Modality.synthetic, out))
    return path
