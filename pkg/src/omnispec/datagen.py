"""Synthetic labeled scenes and the progressive camera-substitution ladder.

Scenes are random axis-aligned rectangles over a background; every class has
a fixed smooth reference spectrum on the canonical 100-point grid, modulated
by per-pixel multiplicative log-normal noise. Rendering a scene through a
filter bank changes only its spectra, never its geometry or labels.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import camera as cam
from .dataio import Corpus, CorpusEntry, SpectralImage, write_image, write_manifest
from .errors import ValidationError
from .rng import stream

# (offset, [(amplitude, center_nm, width_nm), ...]) per class; chosen so the
# minimum pairwise L2 distance between reference spectra stays well above 0.5
_CLASS_SPECTRA = [
    (0.15, [(0.55, 560.0, 45.0), (0.25, 870.0, 60.0)]),
    (0.65, [(-0.35, 650.0, 55.0)]),
    (0.20, [(0.60, 750.0, 40.0)]),
    (0.40, [(0.35, 940.0, 50.0), (0.20, 580.0, 30.0)]),
    (0.10, [(0.45, 600.0, 35.0), (0.45, 820.0, 35.0)]),
    (0.55, [(-0.25, 750.0, 80.0), (0.15, 950.0, 25.0)]),
    (0.25, [(0.30, 530.0, 25.0), (0.40, 900.0, 45.0)]),
    (0.45, [(0.15, 700.0, 20.0), (-0.20, 850.0, 30.0)]),
]

MAX_CLASSES = len(_CLASS_SPECTRA)


def reference_spectra(n_classes: int) -> np.ndarray:
    """(n_classes, 100) reflectance table on the canonical grid."""
    if not 2 <= n_classes <= MAX_CLASSES:
        raise ValidationError(f"n_classes must be in [2, {MAX_CLASSES}]")
    grid = cam.WAVELENGTH_GRID
    table = np.zeros((n_classes, grid.size))
    for k in range(n_classes):
        offset, bumps = _CLASS_SPECTRA[k]
        spectrum = np.full(grid.size, offset)
        for amp, center, width in bumps:
            spectrum = spectrum + amp * np.exp(-((grid - center) ** 2) / (2 * width ** 2))
        table[k] = np.clip(spectrum, 0.02, 1.0)
    return table


def make_toy_scene(rng: np.random.Generator, camera: cam.FilterBank | str = "hsi",
                   n_classes: int = 4, size: int = 32,
                   noise_sigma: float = 0.05) -> SpectralImage:
    """Random labeled scene, rendered hyperspectral or through a filter bank.

    The same rng state always produces the same geometry, so rendering one
    scene under several cameras means drawing with the same seeded stream.
    """
    table = reference_spectra(n_classes)
    labels = np.zeros((size, size), dtype=np.uint16)
    # one guaranteed rectangle per non-background class, plus a few extras
    n_rects = (n_classes - 1) + n_classes
    classes = list(range(1, n_classes)) + list(rng.integers(0, n_classes, size=n_classes))
    for k in classes[:n_rects]:
        rh = int(rng.integers(size // 4, size // 2 + 1))
        rw = int(rng.integers(size // 4, size // 2 + 1))
        r0 = int(rng.integers(0, size - rh + 1))
        c0 = int(rng.integers(0, size - rw + 1))
        labels[r0:r0 + rh, c0:c0 + rw] = k
    cube = table[labels]  # (H, W, 100)
    if noise_sigma > 0:
        factor = rng.lognormal(mean=0.0, sigma=noise_sigma, size=(size, size, 1))
        cube = cube * factor
    wavelengths = cam.WAVELENGTH_GRID.copy()
    if camera != "hsi":
        cube, wavelengths = cam.apply_filter_bank(camera, cube, wavelengths)
    return SpectralImage(data=cube, wavelengths_nm=wavelengths, labels=labels)


def convert_image(img: SpectralImage, bank: cam.FilterBank) -> SpectralImage:
    cube, wavelengths = cam.apply_filter_bank(bank, img.data, img.wavelengths_nm)
    return SpectralImage(data=cube, wavelengths_nm=wavelengths,
                         labels=None if img.labels is None else img.labels.copy())


def build_variant_corpora(out_dir, seed: int, n_subjects: int = 12,
                          n_variants: int = 6, images_per_subject: int = 4,
                          n_val_subjects: int = 2, n_test_subjects: int = 3,
                          size: int = 32, n_classes: int = 4,
                          workers: int = 1) -> dict:
    """Emit a hyperspectral toy corpus plus the progressive-substitution
    ladder: variant k replaces the first k subject pairs with multispectral
    renderings (pair j always under camera j), leaving val/test untouched.

    Also writes per-camera bank files and a multi-camera pretraining
    manifest. `workers` caps the rendering/writing worker count; every image
    derives from its own seeded stream, so output bytes do not depend on
    scheduling. Returns a summary dict of what was written.
    """
    if n_subjects < 2 * n_variants:
        raise ValidationError(f"need at least {2 * n_variants} subjects for "
                              f"{n_variants} variants, got {n_subjects}")
    out_dir = Path(out_dir)
    (out_dir / "hsi").mkdir(parents=True, exist_ok=True)
    banks = []
    for j in range(1, n_variants + 1):
        bank = cam.sample_camera(stream(seed, "camera", j))
        cam.write_bank(out_dir / f"camera_{j:02d}.txt", bank)
        banks.append(bank)

    def subject_name(kind: str, idx: int) -> str:
        return f"{kind}{idx:02d}"

    def run_tasks(tasks):
        if workers > 1:
            from concurrent.futures import ThreadPoolExecutor
            with ThreadPoolExecutor(max_workers=workers) as pool:
                return list(pool.map(lambda fn: fn(), tasks))
        return [fn() for fn in tasks]

    hsi_entries: dict[str, list[CorpusEntry]] = {}
    images: dict[str, list[SpectralImage]] = {}
    roster = ([("train", subject_name("s", i)) for i in range(n_subjects)]
              + [("val", subject_name("v", i)) for i in range(n_val_subjects)]
              + [("test", subject_name("t", i)) for i in range(n_test_subjects)])

    def render_hsi(subject, i, rel):
        img = make_toy_scene(stream(seed, "scene", subject, i),
                             camera="hsi", n_classes=n_classes, size=size)
        write_image(out_dir / rel, img)
        return img

    hsi_tasks = []
    for split, subject in roster:
        hsi_entries[subject] = []
        for i in range(images_per_subject):
            rel = f"hsi/{subject}_{i:02d}.csp"
            hsi_entries[subject].append(CorpusEntry(rel, subject, "hsi", split))
            hsi_tasks.append((subject, lambda s=subject, j=i, r=rel: render_hsi(s, j, r)))
    rendered = run_tasks([fn for _, fn in hsi_tasks])
    for (subject, _), img in zip(hsi_tasks, rendered):
        images.setdefault(subject, []).append(img)

    # MSI renderings for the ladder: subject pair j-1 (0-based) under camera j
    msi_entries: dict[str, list[CorpusEntry]] = {}
    convert_tasks = []
    for j, bank in enumerate(banks, start=1):
        cam_tag = f"cam{j:02d}"
        (out_dir / cam_tag).mkdir(exist_ok=True)
        for subject_idx in (2 * (j - 1), 2 * (j - 1) + 1):
            subject = subject_name("s", subject_idx)
            msi_entries[subject] = []
            for i, img in enumerate(images[subject]):
                rel = f"{cam_tag}/{subject}_{i:02d}.csp"
                msi_entries[subject].append(CorpusEntry(rel, subject, cam_tag, "train"))
                convert_tasks.append(
                    lambda im=img, b=bank, r=rel: write_image(out_dir / r,
                                                              convert_image(im, b)))
    run_tasks(convert_tasks)

    eval_entries = [e for split, subject in roster if split != "train"
                    for e in hsi_entries[subject]]
    manifests = []
    for k in range(n_variants + 1):
        converted = {subject_name("s", i) for i in range(2 * k)}
        entries = []
        for i in range(n_subjects):
            subject = subject_name("s", i)
            entries.extend(msi_entries[subject] if subject in converted
                           else hsi_entries[subject])
        entries.extend(eval_entries)
        name = f"variant_{k}.manifest"
        write_manifest(out_dir / name, entries)
        manifests.append(name)

    pretrain = []
    for i in range(n_subjects):
        subject = subject_name("s", i)
        pretrain.extend(hsi_entries[subject])
        pretrain.extend(msi_entries.get(subject, []))
    write_manifest(out_dir / "pretrain.manifest", pretrain)

    return {
        "manifests": manifests,
        "pretrain_manifest": "pretrain.manifest",
        "cameras": [f"camera_{j:02d}.txt" for j in range(1, n_variants + 1)],
        "n_images": sum(len(v) for v in hsi_entries.values())
        + sum(len(v) for v in msi_entries.values()),
    }


def group_by_camera(corpus: Corpus, split: str = "train") -> dict[str, list[CorpusEntry]]:
    groups: dict[str, list[CorpusEntry]] = {}
    for e in corpus.split(split):
        groups.setdefault(e.camera, []).append(e)
    return groups
