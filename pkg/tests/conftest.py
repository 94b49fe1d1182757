import numpy as np
import pytest

from asdvideo.data import load_manifest
from asdvideo.preprocess import preprocess_dataset
from asdvideo.synth import SyntheticSpec, generate_synthetic

SMALL_SPEC = dict(
    n_subjects=4,
    videos_per_subject=2,
    frames_per_video=24,
    image_size=96,
    face_width=32.0,
    translation_amplitude=3.0,
    seed=3,
)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synthetic")
    _, path = generate_synthetic(SyntheticSpec(**SMALL_SPEC), root)
    return path


@pytest.fixture(scope="session")
def small_preprocessed(small_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("preprocessed")
    manifest = load_manifest(small_dataset)
    preprocess_dataset(manifest, out)
    return manifest, out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
