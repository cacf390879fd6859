import time

import pytest
import torch

from conftest import smoke_config, tiny_config
from dpiqa.dataset import synthetic_quality_set
from dpiqa.distill import (
    StudentConfig,
    StudentModel,
    TeacherMapCache,
    count_parameters,
    mean_distill_loss,
    student_forward,
    train_student,
)
from dpiqa.losses import distill_loss, total_loss
from dpiqa.model import TeacherModel
from dpiqa.training import TrainSchedule


@pytest.fixture(scope="module")
def student():
    return StudentModel(StudentConfig()).eval()


def _x(n=2, size=512, seed=0):
    return torch.rand(n, 3, size, size, generator=torch.Generator().manual_seed(seed)) * 2 - 1


def test_student_shape_contract(student):
    with torch.no_grad():
        fs, score = student_forward(student, _x(3))
        fs2, score2 = student_forward(student, _x(3))
        single = [student_forward(student, _x(3)[i : i + 1])[1] for i in range(3)]
    assert fs.shape == (3, 8, 64, 64) and score.shape == (3,)
    assert torch.isfinite(score).all()
    assert torch.equal(fs, fs2) and torch.equal(score, score2)
    torch.testing.assert_close(torch.cat(single), score, rtol=0, atol=1e-6)


def test_student_non_finite_is_fatal(student):
    x = _x(1)
    x[0, 0, 0, 0] = float("nan")
    with pytest.raises(FloatingPointError):
        student_forward(student, x)


def test_student_is_smaller_than_teacher(student):
    teacher = TeacherModel(smoke_config())
    assert count_parameters(student) < count_parameters(teacher)
    assert count_parameters(student) < count_parameters(TeacherModel(tiny_config()))


def test_efficientnet_student_builds():
    pytest.importorskip("torchvision")
    model = StudentModel(StudentConfig(backbone="efficientnet_b0")).eval()
    with torch.no_grad():
        score, fs = model(_x(1, size=256))
    assert fs.shape == (1, 8, 64, 64) and score.shape == (1,)
    with pytest.raises(ValueError, match="backbone"):
        StudentModel(StudentConfig(backbone="resnet"))


def test_config_round_trip():
    cfg = StudentConfig(widths=(8, 8, 8, 8), head_hidden=16)
    assert StudentConfig.from_dict(cfg.to_dict()) == cfg


def test_gradients_reach_student_not_teacher():
    teacher = TeacherModel(tiny_config()).eval().requires_grad_(False)
    student = StudentModel(StudentConfig(image_size=64))
    x = _x(4, size=64)
    y = torch.tensor([0.1, 0.4, 0.6, 0.9])
    with torch.no_grad():
        _, ft = teacher(x)
    ys, fs = student(x)
    (distill_loss(ft, fs) + total_loss(y, ys)).backward()
    for name, p in student.named_parameters():
        assert p.grad is not None and p.grad.abs().sum() > 0, name
    assert all(p.grad is None for p in teacher.parameters())


def test_cache_memory_and_disk(tmp_path):
    teacher = TeacherModel(tiny_config()).eval()
    x = _x(3, size=64)
    cache = TeacherMapCache(teacher, "abc", root=tmp_path)
    a = cache(x)
    assert cache.misses == 3
    b = cache(x[[2, 0]])
    assert cache.misses == 3
    assert torch.equal(b, a[[2, 0]])
    assert len(list((tmp_path / "abc").glob("*.pt"))) == 3
    fresh = TeacherMapCache(teacher, "abc", root=tmp_path)
    assert torch.equal(fresh(x), a) and fresh.misses == 0
    other = TeacherMapCache(teacher, "def", root=tmp_path)
    other(x[:1])
    assert other.misses == 1
    with torch.no_grad():
        assert torch.equal(a, teacher(x)[1])


def test_train_student_needs_teacher():
    with pytest.raises(ValueError, match="teacher"):
        train_student(StudentModel(), None, synthetic_quality_set(4, size=64), TrainSchedule(batch_size=2))


def test_train_student_leaves_teacher_untouched():
    teacher = TeacherModel(tiny_config())
    before = {k: v.clone() for k, v in teacher.state_dict().items()}
    student = StudentModel(StudentConfig(image_size=64))
    ds = synthetic_quality_set(8, size=64, seed=2)
    sched = TrainSchedule(lr=1e-3, batch_size=4, max_steps=6, val_step=3, val_fraction=0)
    cache = TeacherMapCache(teacher)
    result = train_student(student, teacher, ds, sched, cache=cache)
    assert result.steps == 6
    assert all(torch.equal(v, before[k]) for k, v in teacher.state_dict().items())
    assert all({"distill", "mse", "margin"} <= set(r) for r in result.log if "loss" in r)
    assert cache.misses == 8
    assert mean_distill_loss(student, cache, ds) >= 0


def _latency(model, x, reps=3):
    model.eval()
    with torch.no_grad():
        model(x)
        times = []
        for _ in range(reps):
            start = time.perf_counter()
            model(x)
            times.append(time.perf_counter() - start)
    return min(times)


def test_student_faster_than_teacher(student):
    teacher = TeacherModel(smoke_config())
    x = _x(1)
    assert _latency(student, x) < _latency(teacher, x)
