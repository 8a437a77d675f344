"""Attribute catalog: groups, prompt templates, and seen/unseen splits.

A catalog partitions the attribute vocabulary into named groups (hair,
gender, ...), each with a one-slot sentence template used to turn attribute
words into natural-language prompts. An attribute is identified by its
(group, word) pair; words are unique across groups. Splitting a catalog
separates the attributes available for training from the ones injected only
at evaluation, either by removing a word from its group or by pairing a word
seen elsewhere with a new group (cross-group transfer).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

SLOT = "{}"


class CatalogError(ValueError):
    """Catalog file or split violates an invariant."""


@dataclass(frozen=True)
class Prompt:
    group: str
    attribute: str
    sentence: str


@dataclass(frozen=True)
class AttributeGroup:
    key: str
    template: str
    attributes: tuple[str, ...]

    def __post_init__(self):
        if not self.attributes:
            raise CatalogError(f"group {self.key!r} has no attributes")
        if self.template.count(SLOT) != 1:
            raise CatalogError(
                f"group {self.key!r} template must contain exactly one {SLOT!r} slot"
            )
        if len(set(self.attributes)) != len(self.attributes):
            raise CatalogError(f"group {self.key!r} lists a duplicate attribute")


def render_prompt(group: AttributeGroup, attribute: str) -> Prompt:
    """Fill the group's template with an attribute word.

    The word does not have to be listed in the group: open-vocabulary
    prompts for never-seen attributes go through the same path.
    """
    if not attribute:
        raise CatalogError("attribute must be a non-empty string")
    return Prompt(group.key, attribute, group.template.replace(SLOT, attribute, 1))


@dataclass(frozen=True)
class AttributeCatalog:
    """Seen groups plus, after a split, per-group unseen attribute words."""

    groups: tuple[AttributeGroup, ...]
    unseen: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        keys = [g.key for g in self.groups]
        if len(set(keys)) != len(keys):
            raise CatalogError("duplicate group key")
        owner: dict[str, str] = {}
        for g in self.groups:
            for a in g.attributes:
                if a in owner:
                    raise CatalogError(
                        f"attribute {a!r} appears in groups {owner[a]!r} and {g.key!r}"
                    )
                owner[a] = g.key
        for key, extras in self.unseen.items():
            g = self.group(key)
            overlap = set(extras) & set(g.attributes)
            if overlap:
                raise CatalogError(
                    f"group {key!r}: attributes {sorted(overlap)} are both seen and unseen"
                )
            if len(set(extras)) != len(extras):
                raise CatalogError(f"group {key!r} lists a duplicate unseen attribute")

    @property
    def num_groups(self) -> int:
        return len(self.groups)

    def group(self, key: str) -> AttributeGroup:
        for g in self.groups:
            if g.key == key:
                return g
        raise CatalogError(f"unknown group {key!r}")

    def group_index(self, key: str) -> int:
        for i, g in enumerate(self.groups):
            if g.key == key:
                return i
        raise CatalogError(f"unknown group {key!r}")

    def seen_count(self) -> int:
        return sum(len(g.attributes) for g in self.groups)

    def unseen_count(self) -> int:
        return sum(len(v) for v in self.unseen.values())

    def all_words(self) -> set[str]:
        return {a for g in self.groups for a in g.attributes}

    def seen_prompts(self) -> list[Prompt]:
        """All prompts renderable from training-visible attributes, catalog order."""
        return [render_prompt(g, a) for g in self.groups for a in g.attributes]

    def unseen_prompts(self) -> list[Prompt]:
        out = []
        for g in self.groups:
            for a in self.unseen.get(g.key, ()):
                out.append(render_prompt(g, a))
        return out

    def to_jsonl(self) -> str:
        lines = []
        for g in self.groups:
            record = {
                "key": g.key,
                "template": g.template,
                "attributes": list(g.attributes),
            }
            extras = self.unseen.get(g.key)
            if extras:
                record["unseen"] = list(extras)
            lines.append(json.dumps(record, sort_keys=True))
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        """Content hash used for checkpoint/catalog compatibility checks."""
        return hashlib.sha256(self.to_jsonl().encode("utf-8")).hexdigest()


def parse_catalog(text: str) -> AttributeCatalog:
    groups = []
    unseen: dict[str, tuple[str, ...]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise CatalogError(f"line {lineno}: not valid JSON ({e.msg})") from e
        missing = {"key", "template", "attributes"} - record.keys()
        if missing:
            raise CatalogError(f"line {lineno}: missing fields {sorted(missing)}")
        groups.append(
            AttributeGroup(
                key=record["key"],
                template=record["template"],
                attributes=tuple(record["attributes"]),
            )
        )
        if record.get("unseen"):
            unseen[record["key"]] = tuple(record["unseen"])
    if not groups:
        raise CatalogError("catalog has no groups")
    return AttributeCatalog(tuple(groups), unseen)


def load_catalog(path) -> AttributeCatalog:
    with open(path, "r", encoding="utf-8") as f:
        return parse_catalog(f.read())


def save_catalog(catalog: AttributeCatalog, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(catalog.to_jsonl())


def split_attributes(
    catalog: AttributeCatalog, holdout: list[tuple[str, str]]
) -> AttributeCatalog:
    """Mark (group, word) pairs as unseen.

    Two legal cases per pair: the word is currently listed in that group
    (it is removed from the seen side), or the word is seen in a different
    group (cross-group transfer: it is injected as unseen for the named
    group without touching its home group). A word that exists nowhere in
    the catalog is a split error, as is emptying a group's seen side.
    """
    all_words = catalog.all_words()
    removals: dict[str, set[str]] = {}
    injections: dict[str, list[str]] = {}
    for key, attr in holdout:
        g = catalog.group(key)  # raises for unknown group
        if attr in g.attributes:
            removals.setdefault(key, set()).add(attr)
        elif attr in all_words:
            injections.setdefault(key, []).append(attr)
        else:
            raise CatalogError(f"holdout attribute {attr!r} is unknown to the catalog")
    new_groups = []
    unseen = {k: list(v) for k, v in catalog.unseen.items()}
    for g in catalog.groups:
        held = removals.get(g.key, set())
        remaining = tuple(a for a in g.attributes if a not in held)
        if not remaining:
            raise CatalogError(f"split leaves group {g.key!r} with no seen attribute")
        new_groups.append(AttributeGroup(g.key, g.template, remaining))
        extras = unseen.setdefault(g.key, [])
        extras.extend(a for a in g.attributes if a in held)
        extras.extend(a for a in injections.get(g.key, ()) if a not in extras)
    return AttributeCatalog(
        tuple(new_groups), {k: tuple(v) for k, v in unseen.items() if v}
    )


def parse_holdout(spec: str) -> list[tuple[str, str]]:
    """Parse 'Group:attr,Group:attr' CLI syntax into (group, attribute) pairs."""
    pairs = []
    if not spec:
        return pairs
    for item in spec.split(","):
        item = item.strip()
        if not item:
            continue
        if ":" not in item:
            raise CatalogError(f"holdout entry {item!r} is not Group:attribute")
        key, attr = item.split(":", 1)
        pairs.append((key.strip(), attr.strip()))
    return pairs


# Default eight-group catalog for the synthetic task. Group keys and
# templates follow the usual surveillance-attribute grouping; every word is
# also a key into the synthetic render palette, so any word can be painted
# into any group's region. Cross-group transfer holds out pairs like
# (Lowerbody, "red") while "red" stays visible in Upperbody during training.
DEFAULT_CATALOG = AttributeCatalog(
    (
        AttributeGroup("Hair", "This person has {} hair.", ("black", "blond", "gray", "brown")),
        AttributeGroup("Gender", "This person is {}.", ("male", "female", "neutral")),
        AttributeGroup(
            "Age", "The age of this person is {} years old.", ("15", "30", "45", "60")
        ),
        AttributeGroup(
            "Carry", "This person is carrying {}.", ("backpack", "handbag", "box", "bundle")
        ),
        AttributeGroup(
            "Accessory", "This person is accessory {}.", ("hat", "sunglasses", "muffler", "scarf")
        ),
        AttributeGroup(
            "Foot", "This person is wearing {} in foot.", ("sneakers", "boots", "sandals", "leather")
        ),
        AttributeGroup(
            "Upperbody",
            "This person is wearing {} in upper body.",
            ("red", "green", "white", "purple"),
        ),
        AttributeGroup(
            "Lowerbody",
            "This person is wearing {} in lower body.",
            ("blue", "olive", "beige", "crimson"),
        ),
    )
)

# Holdout used by the open-attribute protocol: one transferable word per
# group that has a natural donor elsewhere in the catalog.
DEFAULT_OPEN_HOLDOUT = [
    ("Hair", "olive"),
    ("Foot", "white"),
    ("Upperbody", "blue"),
    ("Lowerbody", "red"),
]
