import pytest
import torch

from conftest import tiny_config
from dpiqa.checkpoint import VERSION, load_checkpoint, save_checkpoint
from dpiqa.distill import StudentConfig, StudentModel
from dpiqa.model import TeacherModel


def _x():
    return torch.rand(2, 3, 64, 64, generator=torch.Generator().manual_seed(0)) * 2 - 1


def test_teacher_round_trip(tmp_path):
    model = TeacherModel(tiny_config()).eval()
    with torch.no_grad():
        model.text_adapter.fc2.weight.normal_()
    digest = save_checkpoint(model, tmp_path / "t.pt", extra={"dataset_id": "toy"})
    loaded, meta = load_checkpoint(tmp_path / "t.pt")
    assert meta["hash"] == digest and meta["kind"] == "teacher" and meta["extra"] == {"dataset_id": "toy"}
    assert loaded.cfg == model.cfg
    with torch.no_grad():
        assert torch.equal(loaded(_x())[0], model(_x())[0])


def test_student_round_trip(tmp_path):
    model = StudentModel(StudentConfig(widths=(8, 8, 8, 8), image_size=64)).eval()
    save_checkpoint(model, tmp_path / "s.pt")
    loaded, meta = load_checkpoint(tmp_path / "s.pt")
    assert meta["kind"] == "student" and loaded.cfg == model.cfg
    with torch.no_grad():
        assert torch.equal(loaded(_x())[0], model(_x())[0])


def test_hash_is_stable_across_saves_and_names(tmp_path):
    model = TeacherModel(tiny_config())
    a = save_checkpoint(model, tmp_path / "a.pt")
    b = save_checkpoint(model, tmp_path / "sub" / "other_name.pt")
    c = save_checkpoint(TeacherModel(tiny_config(init_seed=1)), tmp_path / "c.pt")
    assert a == b != c


def test_rejects_foreign_and_future_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "none.pt")
    torch.save({"weights": 1}, tmp_path / "foreign.pt")
    with pytest.raises(ValueError, match="not a dpiqa"):
        load_checkpoint(tmp_path / "foreign.pt")
    model = StudentModel(StudentConfig(widths=(8, 8, 8, 8)))
    save_checkpoint(model, tmp_path / "s.pt")
    payload = torch.load(tmp_path / "s.pt", weights_only=False)
    payload["version"] = VERSION + 1
    torch.save(payload, tmp_path / "future.pt")
    with pytest.raises(ValueError, match="newer"):
        load_checkpoint(tmp_path / "future.pt")
