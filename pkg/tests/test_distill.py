import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from conftest import tiny_method
from hypothesis import given, settings
from hypothesis import strategies as st

from sslbackdoor.distill import (
    AnchorBank,
    DistillConfig,
    build_student,
    compress_loss,
    compress_loss_from_logits,
    distill,
    select_clean_subset,
    similarity_distribution,
)
from sslbackdoor.errors import ConfigError, ContractError, DataError
from sslbackdoor.poison import PoisonRecipe, poison_targeted
from sslbackdoor.probe import ProbeConfig, extract_embeddings, fit_probe
from sslbackdoor.seeding import derive_seed
from sslbackdoor.ssl import MethodConfig, train
from sslbackdoor.ssl.train import read_train_log
from sslbackdoor.trigger import TriggerSpec


def bank(rows, tau=1.0):
    rows = torch.as_tensor(np.asarray(rows, dtype=np.float64))
    return AnchorBank(F.normalize(rows, dim=1), tuple(str(i) for i in range(len(rows))), tau)


# --- anchor distributions -------------------------------------------------------------------------


def test_single_anchor():
    assert similarity_distribution(np.array([1.0, 0.0]), bank([[0.0, 1.0]])).tolist() == [1.0]


def test_equidistant_is_uniform():
    b = bank(np.eye(4), tau=0.04)
    p = similarity_distribution(np.full(4, 0.5), b)
    assert np.allclose(p, 0.25, atol=1e-15)


def test_two_anchor_softmax():
    p = similarity_distribution(np.array([1.0, 0.0]), bank([[1.0, 0.0], [0.0, 1.0]]))
    e = math.e
    assert abs(p[0] - e / (e + 1)) <= 1e-9 and abs(p[1] - 1 / (e + 1)) <= 1e-9
    assert p.round(3).tolist() == [0.731, 0.269]


def test_bank_validation():
    with pytest.raises(ConfigError):
        AnchorBank(torch.zeros(0, 3), (), 0.1)
    with pytest.raises(ConfigError):
        bank(np.eye(2), tau=0.0)
    with pytest.raises(ContractError):
        AnchorBank(torch.ones(2, 2), ("a", "b"), 0.1)


# --- KL ----------------------------------------------------------------------------------------------


def test_kl_self_is_zero():
    p = np.array([0.2, 0.3, 0.5])
    assert compress_loss(p, p) == 0.0


def test_kl_worked_example():
    kl = compress_loss(np.array([0.75, 0.25]), np.array([0.5, 0.5]))
    assert kl == pytest.approx(0.75 * math.log(1.5) + 0.25 * math.log(0.5), abs=1e-12)
    assert round(kl, 4) == 0.1308


def test_kl_zero_terms_and_floor():
    assert compress_loss(np.array([1.0, 0.0]), np.array([0.5, 0.5])) == pytest.approx(math.log(2))
    assert np.isfinite(compress_loss(np.array([0.5, 0.5]), np.array([1.0, 0.0])))


def test_kl_contracts():
    with pytest.raises(ContractError):
        compress_loss(np.array([0.5, 0.5]), np.array([1.0]))
    with pytest.raises(ContractError):
        compress_loss(np.array([0.7, 0.7]), np.array([0.5, 0.5]))


def test_kl_non_negative_sampled():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        k = int(rng.integers(2, 12))
        p, q = rng.dirichlet(np.ones(k) * 0.5), rng.dirichlet(np.ones(k) * 0.5)
        assert compress_loss(p, q) >= 0.0
        assert compress_loss(p, p) == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), k=st.integers(2, 20))
def test_logit_form_matches_probability_form(seed, k):
    g = torch.Generator().manual_seed(seed)
    a, b = torch.randn(3, k, generator=g, dtype=torch.float64), torch.randn(3, k, generator=g, dtype=torch.float64)
    direct = compress_loss(F.softmax(a, -1), F.softmax(b, -1))
    assert compress_loss_from_logits(a, b).item() == pytest.approx(direct.item(), abs=1e-10)


# --- distillation runs --------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def teacher(toy_train):
    return train(tiny_method(MethodConfig.preset("moco_v2", "desk")), toy_train)


def small(**kw):
    d = dict(clean_fraction=0.5, anchor_count=16, epochs=2, batch_size=16, hidden_dim=32)
    d.update(kw)
    return DistillConfig(**d)


def test_zero_epochs_is_initialisation(teacher, toy_train):
    student = distill(teacher, toy_train, small(epochs=0))
    torch.manual_seed(derive_seed(0, "student-init") & 0x7FFF_FFFF_FFFF_FFFF)
    init = build_student(student.config).state_dict()
    assert all(torch.equal(student.state_dict[k], init[k]) for k in init)


def test_refuses_poisoned_manifest(teacher, toy_train):
    m = poison_targeted(toy_train, PoisonRecipe.targeted(toy_train, 1, 0.0625, TriggerSpec(10, 7), 0))
    with pytest.raises(DataError, match="poisoned"):
        distill(teacher, m, small())


def test_teacher_untouched_and_student_usable(teacher, toy_train, toy_val, tmp_path):
    before = teacher.content_hash()
    student = distill(teacher, toy_train, small(), out_dir=tmp_path)
    assert teacher.content_hash() == before
    assert student.meta["teacher_hash"] == before
    assert student.meta["anchor_count"] == 16 and student.meta["clean_subset_size"] == 64
    assert (tmp_path / "student.pt").exists()
    emb = extract_embeddings(student, toy_val)
    assert emb.rows.shape == (len(toy_val), 64)
    probe, _ = fit_probe(student, toy_train, ProbeConfig(label_fraction=0.5, epochs=2), check_provenance=False)
    assert probe.weight.shape == (4, 64)


def test_anchor_count_capped(teacher, toy_train, caplog):
    student = distill(teacher, toy_train, small(clean_fraction=0.25, anchor_count=4096, epochs=0))
    assert student.meta["anchor_count"] == 32


def test_distill_loss_trend(teacher, toy_train, tmp_path):
    distill(teacher, toy_train, small(clean_fraction=1.0, epochs=6), out_dir=tmp_path)
    loss = np.array([r["loss"] for r in read_train_log(tmp_path / "distill_log.jsonl")])
    smooth = np.convolve(loss, np.ones(8) / 8, "valid")
    assert np.polyfit(np.arange(len(smooth)), smooth, 1)[0] < 0


def test_clean_subset_is_uniform_and_seeded(toy_train):
    a = select_clean_subset(toy_train, 0.25, 3)
    assert len(a) == 32 and a.ids == select_clean_subset(toy_train, 0.25, 3).ids
    assert a.ids != select_clean_subset(toy_train, 0.25, 4).ids
