"""Core value types: method references and observed call edges."""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass

TYPE_DESCRIPTOR_RE = re.compile(r"\[*(?:[VZBSCIJFD]|L[^;\[()]+;)")
_METHOD_DESCRIPTOR_RE = re.compile(r"\(((?:\[*(?:[ZBSCIJFD]|L[^;\[()]+;))*)\)(\[*(?:[VZBSCIJFD]|L[^;\[()]+;))")


class InvokeKind(str, enum.Enum):
    VIRTUAL = "virtual"
    SUPER = "super"
    DIRECT = "direct"
    STATIC = "static"
    INTERFACE = "interface"

    @classmethod
    def parse(cls, text: str) -> "InvokeKind":
        """Accept ``virtual``, ``invoke-virtual`` or ``invoke-virtual/range``."""
        name = text.strip().lower()
        if name.startswith("invoke-"):
            name = name[len("invoke-"):]
        if name.endswith("/range"):
            name = name[: -len("/range")]
        return cls(name)


def is_type_descriptor(text: str) -> bool:
    return TYPE_DESCRIPTOR_RE.fullmatch(text) is not None


def split_type_list(text: str) -> tuple[str, ...]:
    """Split a concatenation of type descriptors, e.g. ``ILjava/lang/String;[J``."""
    out = []
    pos = 0
    while pos < len(text):
        m = TYPE_DESCRIPTOR_RE.match(text, pos)
        if m is None:
            raise ValueError(f"bad type list {text!r} at {pos}")
        out.append(m.group(0))
        pos = m.end()
    return tuple(out)


def parse_method_descriptor(text: str) -> tuple[tuple[str, ...], str]:
    """``(Ljava/lang/String;I)V`` -> ``(("Ljava/lang/String;", "I"), "V")``."""
    m = _METHOD_DESCRIPTOR_RE.fullmatch(text)
    if m is None:
        raise ValueError(f"bad method descriptor {text!r}")
    return split_type_list(m.group(1)), m.group(2)


def class_to_dotted(descriptor: str) -> str | None:
    """``Lcom/google/ads/AdView;`` -> ``com.google.ads.AdView``; arrays are unwrapped.

    Returns None for primitive types.
    """
    d = descriptor.lstrip("[")
    if len(d) < 3 or d[0] != "L" or d[-1] != ";":
        return None
    return d[1:-1].replace("/", ".")


def dotted_to_class(dotted: str) -> str:
    return "L" + dotted.replace(".", "/") + ";"


def package_of(descriptor: str) -> str | None:
    dotted = class_to_dotted(descriptor)
    if dotted is None or "." not in dotted:
        return None
    return dotted.rsplit(".", 1)[0]


@dataclass(frozen=True, order=True)
class MethodRef:
    """Fully qualified callee. Overloads are distinct: all four fields take part in equality."""

    class_descriptor: str
    method_name: str
    param_descriptors: tuple[str, ...]
    return_descriptor: str

    @property
    def descriptor(self) -> str:
        return "(" + "".join(self.param_descriptors) + ")" + self.return_descriptor

    @classmethod
    def from_parts(cls, class_descriptor: str, method_name: str, descriptor: str) -> "MethodRef":
        params, ret = parse_method_descriptor(descriptor)
        return cls(class_descriptor, method_name, params, ret)

    def with_class(self, class_descriptor: str) -> "MethodRef":
        return MethodRef(class_descriptor, self.method_name, self.param_descriptors, self.return_descriptor)

    def __str__(self) -> str:
        return f"{self.class_descriptor}->{self.method_name}{self.descriptor}"


@dataclass(frozen=True, order=True)
class CallEdge:
    app_id: str
    caller_class: str
    callee: MethodRef
    invoke_kind: InvokeKind = InvokeKind.VIRTUAL

    def with_app(self, app_id: str) -> "CallEdge":
        return CallEdge(app_id, self.caller_class, self.callee, self.invoke_kind)


@dataclass(frozen=True)
class Diagnostic:
    """A non-fatal problem noticed while scanning one app."""

    kind: str
    where: str
    message: str

    def __str__(self) -> str:
        return f"{self.kind} @ {self.where}: {self.message}"


def return_kind(descriptor: str) -> str:
    """Coarse return kind used by structural fingerprints."""
    if descriptor == "V":
        return "void"
    if descriptor.startswith("["):
        return "array"
    if descriptor.startswith("L"):
        return "object"
    return "primitive"


@dataclass(frozen=True)
class ClassSummary:
    """Name-free structural view of one class, enough for fingerprinting and presence checks.

    ``signature`` is the sorted multiset of (parameter count, return kind) over the
    class's methods; None when the class was only seen by name (call-log input).
    """

    descriptor: str
    signature: tuple[tuple[int, str], ...] | None = None
    strings: tuple[str, ...] = ()
