"""
=============================================================================
numerics/rng.py - Детерминированный генератор случайных чисел
=============================================================================

Используется счётчиковый генератор Philox (numpy.random.Philox) поверх
SeedSequence. Каждый независимый поток адресуется путём (seed, ключ1, ключ2,
...): поток эпизода с индексом i не зависит от того, в каком порядке и в каком
потоке выполнения были запрошены другие эпизоды.

Одинаковый seed + одинаковая последовательность вызовов => одинаковый поток
на любой платформе.

=============================================================================
"""

import zlib
from typing import Tuple, Union

import numpy as np


Key = Union[int, str]


def _key_to_int(key: Key) -> int:
    """Строковые ключи потоков переводятся в стабильные 32-битные числа"""
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if key < 0:
        raise ValueError(f"Ключ потока должен быть неотрицательным: {key}")
    return int(key)


class Rng:
    """
    Именованный поток случайных чисел.

    Параметры:
        seed (int): 64-битный seed эксперимента
        stream (tuple): путь потока, например ("episode", 17)
    """

    def __init__(self, seed: int, stream: Tuple[Key, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = tuple(stream)
        sequence = np.random.SeedSequence(
            entropy=self.seed,
            spawn_key=tuple(_key_to_int(k) for k in self.stream),
        )
        self._gen = np.random.Generator(np.random.Philox(sequence))

    def child(self, *keys: Key) -> "Rng":
        """Порождает независимый подпоток (не расходует состояние родителя)"""
        return Rng(self.seed, self.stream + tuple(keys))

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, low: float, high: float, shape=None):
        return self._gen.uniform(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int) -> np.ndarray:
        """Выборка size индексов из range(n) без возвращения"""
        return self._gen.choice(n, size=size, replace=False)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream})"
