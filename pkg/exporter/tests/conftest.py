import pytest

from tiny_vlm import build_tiny_checkpoint, write_test_image


@pytest.fixture(scope="session")
def tiny_model_dir(tmp_path_factory):
    return build_tiny_checkpoint(tmp_path_factory.mktemp("tiny-vlm") / "checkpoint")


@pytest.fixture(scope="session")
def test_image(tmp_path_factory):
    return write_test_image(tmp_path_factory.mktemp("images") / "scene.png")
