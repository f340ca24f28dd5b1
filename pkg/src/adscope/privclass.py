"""Privacy-leak classification of working-API methods."""

from __future__ import annotations

import enum
import os
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

from .apirecon import WorkingApi
from .errors import ConflictingOverrides, RulesetSyntax
from .model import MethodRef


class PrivacyCategory(str, enum.Enum):
    ARBITRARY_DATA = "ArbitraryData"
    KEYWORDS = "Keywords"
    GENDER = "Gender"
    LOCATION = "Location"
    AGE = "Age"
    MULTIPLE_FACTORS = "MultipleFactors"
    POSTAL_CODE = "PostalCode"
    ENABLE_LOCATION = "EnableLocation"
    INCOME = "Income"
    INTERESTS = "Interests"
    AREA_CODE = "AreaCode"
    COUNTRY = "Country"
    EDUCATION = "Education"
    ETHNICITY = "Ethnicity"
    NAME = "Name"
    EMAIL = "EMail"

    @property
    def label(self) -> str:
        return _LABELS[self]

    @property
    def developer_channel(self) -> bool:
        """Data the developer could ship to their own server anyway."""
        return self is PrivacyCategory.ARBITRARY_DATA


_LABELS = {
    PrivacyCategory.ARBITRARY_DATA: "Arbitrary Data",
    PrivacyCategory.KEYWORDS: "Keywords",
    PrivacyCategory.GENDER: "Gender",
    PrivacyCategory.LOCATION: "Location",
    PrivacyCategory.AGE: "Age",
    PrivacyCategory.MULTIPLE_FACTORS: "Multiple Factors",
    PrivacyCategory.POSTAL_CODE: "Postal Code",
    PrivacyCategory.ENABLE_LOCATION: "Enable Location",
    PrivacyCategory.INCOME: "Income",
    PrivacyCategory.INTERESTS: "Interests",
    PrivacyCategory.AREA_CODE: "Area Code",
    PrivacyCategory.COUNTRY: "Country",
    PrivacyCategory.EDUCATION: "Education",
    PrivacyCategory.ETHNICITY: "Ethnicity",
    PrivacyCategory.NAME: "Name",
    PrivacyCategory.EMAIL: "E-Mail",
}

SOURCES = ("heuristic", "shipped", "override")  # ascending precedence
NONE_CATEGORY = "none"


def _pattern_regex(pattern: str) -> re.Pattern:
    return re.compile(".*".join(re.escape(part) for part in pattern.split("*")), re.S)


@dataclass(frozen=True)
class PrivacyRule:
    """``category`` None marks a method as explicitly non-leaking (useful in overrides)."""

    library: str  # canonical name or "*"
    method: str  # exact name, or with "*" wildcards
    category: PrivacyCategory | None
    source: str = "shipped"
    descriptor: str | None = None
    note: str = ""
    order: int = 0  # declaration order within the loaded ruleset

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown rule source {self.source!r}")

    @property
    def precedence(self) -> int:
        return SOURCES.index(self.source)

    @property
    def specificity(self) -> tuple[int, int, int]:
        return ("*" not in self.method, self.library != "*", self.descriptor is not None)

    def matches(self, library: str, method: MethodRef) -> bool:
        if self.library != "*" and self.library != library:
            return False
        if "*" in self.method:
            if not _pattern_regex(self.method).fullmatch(method.method_name):
                return False
        elif self.method != method.method_name:
            return False
        if self.descriptor is not None:
            if "*" in self.descriptor:
                return _pattern_regex(self.descriptor).fullmatch(method.descriptor) is not None
            return self.descriptor == method.descriptor
        return True


@dataclass(frozen=True)
class Classification:
    category: PrivacyCategory | None
    rule: PrivacyRule | None


class Ruleset:
    def __init__(self, rules: Iterable[PrivacyRule]):
        self.rules = tuple(rules)

    def __len__(self) -> int:
        return len(self.rules)

    def __iter__(self):
        return iter(self.rules)

    def with_rules(self, extra: Iterable[PrivacyRule]) -> "Ruleset":
        rules = list(self.rules)
        for r in extra:
            rules.append(_renumber(r, len(rules)))
        return Ruleset(rules)

    def resolve(self, library: str, method: MethodRef) -> Classification:
        """Winning rule: highest source precedence, then most specific, then first declared."""
        matching = [r for r in self.rules if r.matches(library, method)]
        if not matching:
            return Classification(None, None)
        top = max(r.precedence for r in matching)
        level = [r for r in matching if r.precedence == top]
        best_spec = max(r.specificity for r in level)
        tied = [r for r in level if r.specificity == best_spec]
        tied.sort(key=lambda r: r.order)
        if tied[0].source == "override":
            cats = {r.category for r in tied}
            if len(cats) > 1:
                raise ConflictingOverrides(
                    f"{library} {method}: override rules disagree ({', '.join(sorted(str(c and c.value) for c in cats))})")
        return Classification(tied[0].category, tied[0])

    def categories_for(self, library: str) -> set[PrivacyCategory]:
        """Categories that library-specific rules can assign to ``library``."""
        return {r.category for r in self.rules if r.library == library and r.category is not None}


def _renumber(rule: PrivacyRule, order: int) -> PrivacyRule:
    return PrivacyRule(rule.library, rule.method, rule.category, rule.source, rule.descriptor, rule.note, order)


def parse_category(text: str) -> PrivacyCategory | None:
    key = re.sub(r"[\s_-]", "", text).lower()
    if key == NONE_CATEGORY:
        return None
    for cat in PrivacyCategory:
        if cat.value.lower() == key:
            return cat
    raise ValueError(f"unknown category {text!r}")


def parse_rules(text: str, force_source: str | None = None, start: int = 0) -> list[PrivacyRule]:
    """Rule records: ``library|*<TAB>method<TAB>descriptor|-<TAB>category<TAB>source<TAB>note``."""
    rules = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        cols = [c.strip() for c in line.split("\t")]
        if len(cols) < 4:
            raise RulesetSyntax(f"expected at least 4 fields, got {len(cols)}", lineno)
        library, method, descriptor, category = cols[:4]
        source = cols[4] if len(cols) > 4 and cols[4] else "shipped"
        note = cols[5] if len(cols) > 5 else ""
        if force_source is not None:
            source = force_source
        if not library or not method:
            raise RulesetSyntax("library and method are required", lineno)
        try:
            rules.append(PrivacyRule(
                library, method, parse_category(category), source,
                None if descriptor in ("", "-") else descriptor, note, start + len(rules)))
        except ValueError as exc:
            raise RulesetSyntax(str(exc), lineno) from None
    return rules


def load_ruleset(paths: Iterable[str | os.PathLike] = (), overrides: Iterable[str | os.PathLike] = (),
                 include_default: bool = True) -> Ruleset:
    """Shipped rules (packaged default and/or files) plus user overrides, which always load as overrides."""
    rules: list[PrivacyRule] = []
    if include_default:
        rules += parse_rules(default_rules_text(), start=len(rules))
    for p in paths:
        rules += parse_rules(Path(p).read_text(encoding="utf-8"), start=len(rules))
    for p in overrides:
        rules += parse_rules(Path(p).read_text(encoding="utf-8"), force_source="override", start=len(rules))
    return Ruleset(rules)


def default_rules_text() -> str:
    return resources.files("adscope").joinpath("data/rules.tsv").read_text(encoding="utf-8")


def format_rules(rules: Iterable[PrivacyRule]) -> str:
    return "".join(
        "\t".join([r.library, r.method, r.descriptor or "-", r.category.value if r.category else NONE_CATEGORY,
                   r.source, r.note]) + "\n"
        for r in rules
    )


ClassifiedApi = dict[str, dict[MethodRef, Classification]]


def classify(apis: Mapping[str, WorkingApi], ruleset: Ruleset) -> ClassifiedApi:
    """Resolve a category (or None) for every working-API method of every library."""
    out: ClassifiedApi = {}
    for lib in sorted(apis):
        out[lib] = {e.method: ruleset.resolve(lib, e.method) for e in apis[lib].entries}
    return out


def coverage(classified: ClassifiedApi) -> dict[str, dict[str, int]]:
    return {
        lib: {
            "classified": sum(c.category is not None for c in m.values()),
            "none": sum(c.category is None for c in m.values()),
            "total": len(m),
        }
        for lib, m in classified.items()
    }


# --- name heuristic --------------------------------------------------------

_TOKEN_RE = re.compile(r"[A-Z]+(?=[A-Z][a-z])|[A-Z]?[a-z]+|[A-Z]+|\d+")
SETTER_PREFIXES = {"set", "add", "put", "with", "update", "append"}
GETTER_PREFIXES = {"get", "is", "has", "should"}
MAP_TYPES = {
    "Ljava/util/Map;", "Ljava/util/HashMap;", "Ljava/util/Hashtable;", "Ljava/util/Dictionary;",
    "Ljava/util/TreeMap;", "Ljava/util/LinkedHashMap;", "Landroid/os/Bundle;", "Lorg/json/JSONObject;",
}

# token -> (category, confidence); checked against single tokens and adjacent-token joins
_DICTIONARY = {
    "gender": (PrivacyCategory.GENDER, 0.95),
    "sex": (PrivacyCategory.GENDER, 0.9),
    "age": (PrivacyCategory.AGE, 0.9),
    "birth": (PrivacyCategory.AGE, 0.9),
    "birthday": (PrivacyCategory.AGE, 0.95),
    "birthdate": (PrivacyCategory.AGE, 0.95),
    "dob": (PrivacyCategory.AGE, 0.85),
    "location": (PrivacyCategory.LOCATION, 0.9),
    "latitude": (PrivacyCategory.LOCATION, 0.85),
    "longitude": (PrivacyCategory.LOCATION, 0.85),
    "lat": (PrivacyCategory.LOCATION, 0.8),
    "lng": (PrivacyCategory.LOCATION, 0.8),
    "lon": (PrivacyCategory.LOCATION, 0.75),
    "geo": (PrivacyCategory.LOCATION, 0.8),
    "zip": (PrivacyCategory.POSTAL_CODE, 0.9),
    "zipcode": (PrivacyCategory.POSTAL_CODE, 0.95),
    "postal": (PrivacyCategory.POSTAL_CODE, 0.9),
    "postalcode": (PrivacyCategory.POSTAL_CODE, 0.95),
    "postcode": (PrivacyCategory.POSTAL_CODE, 0.95),
    "income": (PrivacyCategory.INCOME, 0.95),
    "interest": (PrivacyCategory.INTERESTS, 0.85),
    "interests": (PrivacyCategory.INTERESTS, 0.9),
    "keyword": (PrivacyCategory.KEYWORDS, 0.9),
    "keywords": (PrivacyCategory.KEYWORDS, 0.9),
    "search": (PrivacyCategory.KEYWORDS, 0.7),
    "email": (PrivacyCategory.EMAIL, 0.95),
    "country": (PrivacyCategory.COUNTRY, 0.9),
    "ethnic": (PrivacyCategory.ETHNICITY, 0.9),
    "ethnicity": (PrivacyCategory.ETHNICITY, 0.95),
    "race": (PrivacyCategory.ETHNICITY, 0.85),
    "education": (PrivacyCategory.EDUCATION, 0.95),
    "areacode": (PrivacyCategory.AREA_CODE, 0.95),
}
_FACTOR_TOKENS = {"demographic", "demographics", "extras", "extra", "targeting", "params"}
_EVENT_TOKENS = {"event", "log"}
_ENABLE_TOKENS = {"enable", "enabled", "disable", "allow", "awareness", "inquiry", "report"}


def tokenize(name: str) -> list[str]:
    return [t.lower() for t in _TOKEN_RE.findall(name)]


def heuristic_suggest(method: MethodRef) -> tuple[PrivacyCategory | None, float]:
    """Guess a category from the method name and parameter types. Never authoritative."""
    tokens = tokenize(method.method_name)
    if not tokens:
        return None, 0.0
    params = method.param_descriptors
    scale = 0.5 if tokens[0] in GETTER_PREFIXES else 1.0
    words = set(tokens)
    words.update(a + b for a, b in zip(tokens, tokens[1:]))

    location = {"location", "geo"} & words
    if location and _ENABLE_TOKENS & words:
        return PrivacyCategory.ENABLE_LOCATION, 0.9 * scale
    if _FACTOR_TOKENS & words and any(p in MAP_TYPES for p in params):
        return PrivacyCategory.MULTIPLE_FACTORS, 0.85 * scale

    best: tuple[PrivacyCategory | None, float] = (None, 0.0)
    for word in tokens + [a + b for a, b in zip(tokens, tokens[1:])]:
        hit = _DICTIONARY.get(word)
        if hit is not None and hit[1] > best[1]:
            best = hit
    if best[0] is not None:
        return best[0], best[1] * scale

    if "name" in tokens and tokens[0] in SETTER_PREFIXES:
        return PrivacyCategory.NAME, 0.6
    if _EVENT_TOKENS & words and "Ljava/lang/String;" in params:
        return PrivacyCategory.ARBITRARY_DATA, 0.8 * scale
    if _FACTOR_TOKENS & words:
        return PrivacyCategory.MULTIPLE_FACTORS, 0.4 * scale
    return None, 0.0


def suggest_rules(library: str, api: WorkingApi, ruleset: Ruleset) -> list[tuple[PrivacyRule, float]]:
    """Heuristic rules for working-API methods that no rule covers yet."""
    out = []
    seen = set()
    for entry in api.entries:
        if ruleset.resolve(library, entry.method).rule is not None:
            continue
        cat, conf = heuristic_suggest(entry.method)
        if cat is None:
            continue
        key = (entry.method.method_name, entry.method.descriptor)
        if key in seen:
            continue
        seen.add(key)
        note = f"suggested confidence={conf:.2f} class={entry.method.class_descriptor} apps={entry.app_count}"
        out.append((PrivacyRule(library, entry.method.method_name, cat, "heuristic",
                                entry.method.descriptor, note), conf))
    return out
