import os
import random
import string

import pytest

from labnet.wire import DataPoint, NodePayload

GOLDEN_DIR = os.path.join(os.path.dirname(__file__), "golden")


def golden(name: str) -> str:
    with open(os.path.join(GOLDEN_DIR, name), encoding="utf-8") as fh:
        return fh.read()


IDENT_CHARS = string.ascii_letters + string.digits + "_-"
KEY_CHARS = string.ascii_letters + string.digits + "_.-"


def random_ident(rng: random.Random, max_len: int = 8) -> str:
    return "".join(rng.choice(IDENT_CHARS) for _ in range(rng.randint(1, max_len)))


def random_key(rng: random.Random, max_len: int = 8) -> str:
    return "".join(rng.choice(KEY_CHARS) for _ in range(rng.randint(1, max_len)))


def random_float(rng: random.Random) -> float:
    kind = rng.randrange(4)
    if kind == 0:
        return rng.uniform(-1000, 1000)
    if kind == 1:
        return round(rng.uniform(-100, 100), rng.randint(0, 3))
    if kind == 2:
        return rng.uniform(-1, 1) * 10 ** rng.randint(-20, 20)
    return float(rng.randint(-10**9, 10**9))


def random_payload(rng: random.Random) -> NodePayload:
    readings = []
    for _ in range(rng.randint(0, 4)):  # groups
        meas = random_key(rng)
        for _ in range(rng.randint(1, 5)):
            readings.append((meas, random_key(rng), random_float(rng)))
    return NodePayload(
        random_ident(rng), random_ident(rng), rng.randrange(2**32), tuple(readings)
    )


NAME_CHARS = string.ascii_letters + string.digits + "_.,= -\\"


def random_name(rng: random.Random, max_len: int = 10) -> str:
    return "".join(rng.choice(NAME_CHARS) for _ in range(rng.randint(1, max_len)))


def random_point(rng: random.Random, with_timestamp: bool = True) -> DataPoint:
    tags = {}
    for _ in range(rng.randint(0, 3)):
        tags[random_name(rng)] = random_name(rng)
    fields = {}
    for _ in range(rng.randint(1, 4)):
        fields[random_name(rng)] = random_float(rng)
    ts = rng.randint(0, 2**62) if with_timestamp else None
    return DataPoint(random_name(rng), tags, fields, ts)


@pytest.fixture
def rng():
    return random.Random(0xC0FFEE)
