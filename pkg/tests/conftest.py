import pytest

from e5sh.harness.scenes import SceneSpec, gen_dataset


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """A 12-scene 160x120 split, cheap enough for closed-loop runs."""
    root = tmp_path_factory.mktemp("data")
    gen_dataset(SceneSpec(width=160, height=120), 12, 1, root)
    return str(root)
