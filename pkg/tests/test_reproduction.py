"""Desk-scale reproductions of the transformed-MNIST benchmarks.

Skipped unless ``TARGET_VAE_MNIST_DIR`` points at the raw MNIST idx files. Each trained model
is cached for the module, so the whole file trains five models once.
"""

import os

import numpy as np
import pytest
import torch

from target_vae.config.settings import ModelConfig, PriorConfig, TrainConfig
from target_vae.core.model import build_variant
from target_vae.core.training import fit
from target_vae.data.ingest import load_mnist
from target_vae.data.synthesis import synthesize_multi_object, synthesize_transformed_mnist
from target_vae.evaluation.detection import detect_objects, match_detections
from target_vae.evaluation.metrics import eval_clustering, eval_pose, eval_rotation_rmse

MNIST_DIR = os.environ.get("TARGET_VAE_MNIST_DIR")
N_TRAIN = 20000
N_TEST = 2000
EPOCHS = 100

pytestmark = [
    pytest.mark.reproduction,
    pytest.mark.skipif(not MNIST_DIR, reason="TARGET_VAE_MNIST_DIR is not set"),
]


@pytest.fixture(scope="module")
def mnist():
    digits, labels = load_mnist(MNIST_DIR, "train")
    test_digits, test_labels = load_mnist(MNIST_DIR, "test")
    keep = np.random.default_rng(0).choice(len(digits), N_TRAIN, replace=False)
    return digits[keep], labels[keep], test_digits[:N_TEST], test_labels[:N_TEST]


@pytest.fixture(scope="module")
def datasets(mnist):
    digits, labels, test_digits, test_labels = mnist
    return {
        rotation: (
            synthesize_transformed_mnist(digits, labels, rotation=rotation, seed=1),
            synthesize_transformed_mnist(test_digits, test_labels, rotation=rotation, seed=2),
        )
        for rotation in ("uniform", "normal")
    }


@pytest.fixture(scope="module")
def trained(datasets, tmp_path_factory):
    cache = {}

    def get(variant, rotation="uniform"):
        key = (variant, rotation)
        if key not in cache:
            torch.manual_seed(0)
            prior = PriorConfig(theta_prior=rotation)
            model = build_variant(variant, ModelConfig(z_dim=2), prior)
            out = tmp_path_factory.mktemp(f"{variant}-{rotation}")
            fit(datasets[rotation][0].images, model, TrainConfig(max_epochs=EPOCHS, seed=0), out)
            cache[key] = model
        return cache[key]

    return get


def test_pose_inference_uniform_rotations(trained, datasets):
    metrics = eval_pose(trained("FULL_P4"), datasets["uniform"][1])
    assert metrics.r_x >= 0.90
    assert metrics.r_y >= 0.90
    assert metrics.circular >= 0.60


def test_pose_inference_normal_rotations(trained, datasets):
    metrics = eval_pose(trained("FULL_P4", "normal"), datasets["normal"][1])
    assert metrics.circular >= 0.65


def test_rotation_awareness_doubles_clustering_accuracy(trained, datasets):
    test = datasets["uniform"][1]
    full = eval_clustering(trained("FULL_P4"), test)
    translation_only = eval_clustering(trained("V1"), test)
    assert full >= 45.0
    assert full >= 2 * translation_only


def test_ablations_lose_rotation(trained, datasets):
    test = datasets["uniform"][1]
    for variant in ("V1", "V2", "V3"):
        metrics = eval_pose(trained(variant), test)
        assert abs(metrics.circular or 0.0) < 0.10, variant
        assert metrics.r_x >= 0.90 and metrics.r_y >= 0.90, variant
    full_p4 = eval_pose(trained("FULL_P4"), test).circular
    assert full_p4 >= 0.60
    assert eval_pose(trained("FULL_P16"), test).circular >= full_p4 - 0.05


def test_rotation_rmse(trained, datasets):
    test = datasets["uniform"][1]
    full = eval_rotation_rmse(trained("FULL_P4"), test, n_rotations=40, n_images=500)
    blind = eval_rotation_rmse(trained("V1"), test, n_rotations=40, n_images=500)
    assert np.mean(list(full.values())) <= 35.0
    assert np.mean(list(blind.values())) >= 80.0


def test_multi_object_detection(trained, datasets):
    model = trained("FULL_P4")
    canvases = synthesize_multi_object(datasets["uniform"][1], 100, count=3, seed=3, non_overlapping=True)
    hits = false_positives = 0
    errors = []
    for i in range(len(canvases)):
        found = detect_objects(model, canvases.images[i], render=False)
        tp, fp, err = match_detections(found, canvases.object_t[i])
        hits, false_positives = hits + tp, false_positives + fp
        errors.extend(err)
    assert hits / (3 * len(canvases)) >= 0.9
    assert false_positives / len(canvases) <= 0.1
    assert max(errors) <= 3.0
