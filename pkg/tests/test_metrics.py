import numpy as np
import pytest
import torch

from promptalign.boxes import BoxLabel
from promptalign.metrics import evaluate_map
from promptalign.types import DetectionSet

from oracles import brute_force_map, random_map_case


def test_perfect_single_detection():
    truth = [[BoxLabel(0, (0.5, 0.5, 0.2, 0.2))]]
    preds = [[(0, 0.9, (0.51, 0.5, 0.2, 0.2))]]
    assert evaluate_map(preds, truth) == 100.0


def test_no_detections():
    truth = [[BoxLabel(0, (0.5, 0.5, 0.2, 0.2))]]
    assert evaluate_map([[]], truth) == 0.0


def test_empty_truth_rejected():
    with pytest.raises(ValueError):
        evaluate_map([[]], [[]])


def test_matches_brute_force_on_random_cases():
    rng = np.random.default_rng(0)
    for _ in range(10):
        preds, truth = random_map_case(rng)
        assert evaluate_map(preds, truth) == pytest.approx(brute_force_map(preds, truth), abs=1e-9)


def test_detection_set_input():
    logits = torch.tensor([[5.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 5.0]])
    boxes = torch.tensor([[0.5, 0.5, 0.2, 0.2], [0.1, 0.1, 0.1, 0.1]])
    truth = [[BoxLabel(0, (0.5, 0.5, 0.2, 0.2))]]
    assert evaluate_map([DetectionSet(logits, boxes)], truth) == pytest.approx(100.0)
    keep = torch.tensor([False, True])
    assert evaluate_map([DetectionSet(logits, boxes, keep)], truth) == 0.0


def test_false_positive_ranked_first_halves_precision():
    truth = [[BoxLabel(0, (0.5, 0.5, 0.2, 0.2))]]
    preds = [[(0, 0.9, (0.1, 0.1, 0.1, 0.1)), (0, 0.8, (0.5, 0.5, 0.2, 0.2))]]
    # recall 1 is reached at precision 1/2 for every interpolation point
    assert evaluate_map(preds, truth) == pytest.approx(50.0)
