#!/usr/bin/env python3
"""Dense patch-feature extraction and pseudo-label dumping.

For every image in a directory this script computes per-pixel descriptors,
separates foreground from background by saliency clustering, groups the
foreground into part clusters, PCA-reduces the descriptors, and writes the
four files the optimization pipeline ingests:

    i.rgb.png       the image, RGB
    i.mask.png      foreground mask, 255 = foreground
    i.clusters.png  part labels, 0 = background, 1..K = parts
    i.feat.bin      "HLFM" header + little-endian float32 (h, w, d) features

Two feature backends are available. The default "patch" backend is a
deterministic multi-scale color/gradient descriptor with no external model
downloads. The "dino" backend runs a self-supervised ViT through the
transformers library when it is installed.
"""

import argparse
import logging
import struct
import sys
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.cluster.vq import kmeans2
from scipy.ndimage import gaussian_filter, sobel

log = logging.getLogger("feature_dump")

FEAT_MAGIC = b"HLFM"
PATCH_SCALES = (1.0, 2.0, 4.0)


def write_feature_map(path, feat):
    h, w, d = feat.shape
    with open(path, "wb") as fh:
        fh.write(FEAT_MAGIC)
        fh.write(struct.pack("<III", h, w, d))
        fh.write(feat.astype("<f4").tobytes())


def patch_features(rgb):
    """Multi-scale color and gradient descriptor, one vector per pixel."""
    channels = []
    gray = rgb.mean(axis=-1)
    for s in PATCH_SCALES:
        for c in range(3):
            channels.append(gaussian_filter(rgb[..., c], s))
        blur = gaussian_filter(gray, s)
        gy = sobel(blur, axis=0)
        gx = sobel(blur, axis=1)
        channels.append(np.hypot(gx, gy))
        channels.append(gy)
        channels.append(gx)
    return np.stack(channels, axis=-1)


def dino_features(rgb, model_name, layer):
    try:
        import torch
        from transformers import AutoImageProcessor, AutoModel
    except ImportError as exc:
        raise SystemExit(
            "the dino backend needs torch and transformers; install them "
            "with 'pip install torch transformers' or rerun with "
            "--backend patch") from exc
    processor = AutoImageProcessor.from_pretrained(model_name)
    model = AutoModel.from_pretrained(model_name, output_hidden_states=True)
    model.eval()
    img = Image.fromarray((rgb * 255).astype(np.uint8))
    with torch.no_grad():
        inputs = processor(images=img, return_tensors="pt")
        out = model(**inputs)
    tokens = out.hidden_states[layer][0, 1:].numpy()  # drop CLS
    side = int(round(np.sqrt(tokens.shape[0])))
    grid = tokens.reshape(side, side, -1)
    h, w = rgb.shape[:2]
    rows = np.minimum((np.arange(h) * side) // h, side - 1)
    cols = np.minimum((np.arange(w) * side) // w, side - 1)
    return grid[rows][:, cols]


def pca_reduce(flat, dims):
    """Project row vectors onto their top principal directions."""
    dims = min(dims, flat.shape[1])
    mean = flat.mean(axis=0)
    centered = flat - mean
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    basis = vt[:dims]
    # fix component signs so the projection is reproducible
    signs = np.sign(basis[np.arange(dims), np.abs(basis).argmax(axis=1)])
    basis = basis * signs[:, None]
    return centered @ basis.T


def saliency_mask(feat, seed, border=2):
    """Foreground = clusters that rarely touch the image border."""
    h, w = feat.shape[:2]
    flat = feat.reshape(-1, feat.shape[-1])
    scale = flat.std(axis=0)
    flat = flat / np.where(scale > 1e-12, scale, 1.0)
    labels = kmeans2(flat, 3, minit="++", seed=seed)[1].reshape(h, w)
    edge = np.zeros((h, w), dtype=bool)
    edge[:border] = edge[-border:] = True
    edge[:, :border] = edge[:, -border:] = True
    mask = np.zeros((h, w), dtype=bool)
    for lbl in range(3):
        sel = labels == lbl
        if sel.any() and edge[sel].mean() < 0.5 * edge.mean():
            mask |= sel
    if not mask.any():
        # degenerate segmentation: keep the smallest cluster
        counts = [(labels == lbl).sum() for lbl in range(3)]
        mask = labels == int(np.argmin(counts))
    return mask


def part_clusters(feat, mask, k, seed):
    labels = np.zeros(mask.shape, dtype=np.int64)
    fg = feat[mask]
    if len(fg) < k:
        labels[mask] = 1
        return labels
    assign = kmeans2(fg, k, minit="++", seed=seed)[1]
    labels[mask] = assign + 1
    return labels


def process_image(path, args, index, out_dir):
    rgb = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    h, w = rgb.shape[:2]
    if args.backend == "dino":
        feat = dino_features(rgb, args.model, args.layer)
    else:
        feat = patch_features(rgb)
    reduced = pca_reduce(feat.reshape(h * w, -1), args.dims)
    norms = np.linalg.norm(reduced, axis=1, keepdims=True)
    reduced = reduced / np.where(norms > 1e-12, norms, 1.0)
    reduced = reduced.reshape(h, w, -1)
    mask = saliency_mask(feat, args.seed + index)
    labels = part_clusters(reduced, mask, args.clusters, args.seed + index)
    Image.fromarray((rgb * 255).round().astype(np.uint8)).save(
        out_dir / f"{index}.rgb.png")
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(
        out_dir / f"{index}.mask.png")
    Image.fromarray(labels.astype(np.uint8)).save(
        out_dir / f"{index}.clusters.png")
    write_feature_map(out_dir / f"{index}.feat.bin", reduced)
    log.info("%s -> instance %d (%d foreground px, %d parts)", path.name,
             index, int(mask.sum()), len(np.unique(labels)) - 1)


def build_parser():
    ap = argparse.ArgumentParser(
        description="Extract dense features and pseudo-labels for an "
        "image directory")
    ap.add_argument("--images", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--clusters", type=int, default=4)
    ap.add_argument("--dims", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--backend", choices=("patch", "dino"), default="patch")
    ap.add_argument("--model", default="facebook/dino-vits8",
                    help="transformers model id for the dino backend")
    ap.add_argument("--layer", type=int, default=-1,
                    help="hidden-state layer for the dino backend")
    return ap


def main(argv=None):
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.clusters < 2:
        raise SystemExit("--clusters must be at least 2")
    images = sorted(p for p in Path(args.images).iterdir()
                    if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not images:
        raise SystemExit(f"no images found in {args.images}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for index, path in enumerate(images):
        process_image(path, args, index, out_dir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
