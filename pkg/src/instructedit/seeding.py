"""One root seed, split per subsystem by fixed labels."""

import hashlib

import torch


def derive_seed(root: int, label: str) -> int:
    digest = hashlib.sha256(f"{int(root)}/{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def torch_generator(root: int, label: str) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(root, label))


def single_threaded():
    """Pin torch to one thread so repeated runs are bit-identical."""
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
