"""Per-class FIFO queues of momentum-branch embeddings."""

from __future__ import annotations

import numpy as np
import torch

from anticomp.core import DegenerateInputError, InvalidArgumentError, InvalidStateError, normalize


class MemoryBank:
    """Fixed-capacity ring buffer of unit-norm embeddings.

    Vectors are normalized on the way in, so every live row has unit norm
    regardless of what the caller passes.
    """

    def __init__(self, capacity: int = 16384, dim: int = 512, dtype: torch.dtype = torch.float32):
        if capacity <= 0 or dim <= 0:
            raise InvalidArgumentError("capacity and dim must be positive")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self._storage = torch.zeros(self.capacity, self.dim, dtype=dtype)
        self.write_cursor = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    @property
    def filled(self) -> bool:
        return self._size == self.capacity

    @property
    def dtype(self) -> torch.dtype:
        return self._storage.dtype

    @torch.no_grad()
    def push(self, batch) -> "MemoryBank":
        batch = torch.as_tensor(batch).detach()
        if batch.ndim == 1:
            batch = batch.unsqueeze(0)
        if batch.ndim != 2 or batch.shape[1] != self.dim:
            raise InvalidArgumentError(f"expected (n, {self.dim}) embeddings, got {tuple(batch.shape)}")
        n = batch.shape[0]
        if n == 0:
            return self
        if (batch.norm(dim=1) == 0).any():
            raise DegenerateInputError("cannot store a zero embedding")
        batch = normalize(batch.to(self.dtype))
        if n > self.capacity:
            batch = batch[-self.capacity :]
            self.write_cursor = (self.write_cursor + n - self.capacity) % self.capacity
            n = self.capacity
        idx = (self.write_cursor + torch.arange(n)) % self.capacity
        self._storage[idx] = batch
        self.write_cursor = int((self.write_cursor + n) % self.capacity)
        self._size = min(self.capacity, self._size + n)
        return self

    def snapshot(self) -> torch.Tensor:
        """Copy of the live rows, oldest first."""
        if not self.filled:
            return self._storage[: self._size].clone()
        c = self.write_cursor
        return torch.cat([self._storage[c:], self._storage[:c]]).clone()

    def prefill(self, rng: np.random.Generator) -> "MemoryBank":
        """Fill an empty bank with random unit vectors."""
        if self._size:
            raise InvalidStateError("prefill requires an empty bank")
        noise = rng.standard_normal((self.capacity, self.dim))
        self._storage.copy_(torch.from_numpy(normalize(noise)).to(self.dtype))
        self._size = self.capacity
        self.write_cursor = 0
        return self

    def state_dict(self) -> dict:
        return {
            "capacity": self.capacity,
            "dim": self.dim,
            "storage": self._storage.clone(),
            "write_cursor": self.write_cursor,
            "size": self._size,
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "MemoryBank":
        bank = cls(state["capacity"], state["dim"], dtype=state["storage"].dtype)
        bank._storage.copy_(state["storage"])
        bank.write_cursor = int(state["write_cursor"])
        bank._size = int(state["size"])
        return bank


def combined_anchors(bank_real: MemoryBank, bank_fake: MemoryBank) -> torch.Tensor:
    """Real rows first, then fake rows."""
    if bank_real.dim != bank_fake.dim:
        raise InvalidArgumentError("banks disagree on embedding dim")
    return torch.cat([bank_real.snapshot(), bank_fake.snapshot()])
