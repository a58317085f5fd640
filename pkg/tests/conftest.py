import pytest
import torch

from instructedit.dataset import BuildConfig, build_dataset, make_synth_sources
from instructedit.forge import FixtureVlmClient

torch.set_num_threads(1)


def build_small(root, quotas="8,6,10", seed=0, **kw):
    cfg = BuildConfig(quotas=quotas, seed=seed, workers=2, **kw)
    dirs, fixtures = make_synth_sources(cfg, root / "work")
    client = FixtureVlmClient(fixtures)
    manifest = build_dataset(cfg, root / "data", client, source_dirs=dirs)
    return root / "data", manifest, client, cfg, dirs


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    data_dir, manifest, client, cfg, dirs = build_small(root)
    return data_dir, manifest
