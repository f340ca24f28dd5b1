"""Random DEX fixtures and planted call sets shared by several test modules."""

from __future__ import annotations

import random

from adscope.model import InvokeKind, MethodRef
from dexbuilder import (
    FILLER_WIDTHS,
    ConstString,
    DexBuilder,
    FillArray,
    Filler,
    Invoke,
    InvokeNoEdge,
    MethodSpec,
    Nop,
    PackedSwitch,
    ReturnVoid,
    SparseSwitch,
)

TYPES = ["I", "J", "Z", "D", "Ljava/lang/String;", "Landroid/content/Context;", "[B", "Ljava/util/Map;"]
CALLEE_CLASSES = [
    "Lcom/google/ads/AdRequest;", "Lcom/google/ads/AdView;", "Lcom/admob/android/ads/AdManager;",
    "Lcom/flurry/android/FlurryAgent;", "Lcom/inmobi/androidsdk/IMAdRequest;", "Landroid/util/Log;",
    "Ljava/lang/StringBuilder;", "Lcom/adwhirl/AdWhirlTargeting;",
]
NAMES = ["<init>", "loadAd", "setGender", "setAge", "setLocation", "logEvent", "append", "d", "setKeywords"]


def random_ref(rng: random.Random) -> MethodRef:
    params = tuple(rng.choice(TYPES) for _ in range(rng.randint(0, 3)))
    ret = rng.choice(["V"] + TYPES)
    return MethodRef(rng.choice(CALLEE_CLASSES), rng.choice(NAMES), params, ret)


def random_code(rng: random.Random, n: int) -> list:
    code = []
    for _ in range(n):
        r = rng.random()
        if r < 0.4:
            code.append(Invoke(rng.choice(list(InvokeKind)), random_ref(rng), range=rng.random() < 0.3))
        elif r < 0.5:
            code.append(rng.choice([PackedSwitch(rng.randint(0, 5)), SparseSwitch(rng.randint(0, 5)),
                                    FillArray(rng.choice([1, 2, 4, 8]), rng.randint(0, 7))]))
        elif r < 0.6:
            code.append(Nop())
        elif r < 0.65:
            code.append(ConstString(rng.choice(["ad_unit", "https://ads.example/req", "kéy", "x"])))
        elif r < 0.68:
            code.append(InvokeNoEdge(polymorphic=rng.random() < 0.5))
        else:
            code.append(Filler(rng.choice(sorted(FILLER_WIDTHS))))
    code.append(ReturnVoid())
    return code


def random_builder(rng: random.Random, max_classes: int = 4, version: str | None = None) -> DexBuilder:
    b = DexBuilder(version or rng.choice(["035", "037", "038", "039"]))
    for ci in range(rng.randint(1, max_classes)):
        pkg = rng.choice(["com/example/app", "org/game", "com/google/ads", "net/x"])
        methods = []
        used = set()
        for mi in range(rng.randint(0, 4)):
            name = f"m{mi}"
            params = tuple(rng.choice(TYPES) for _ in range(rng.randint(0, 2)))
            if (name, params) in used:
                continue
            used.add((name, params))
            code = None if rng.random() < 0.15 else random_code(rng, rng.randint(0, 12))
            methods.append(MethodSpec(name, params, rng.choice(["V", "I", "Ljava/lang/Object;"]), code))
        b.add_class(f"L{pkg}/C{ci};", methods)
    return b
