"""VO management plane: descriptor registry, discovery, key minting.

The registry is the platform's source of truth for which virtual
objects exist, who owns them, what they offer and whether they are
alive. It is also the key-minting authority: grants are issued here and
pushed to the target object's access controller before the minting call
returns, so a freshly issued key always works immediately.

Discovery is capability-scoped: a search only returns objects the
requester could actually open with the keys presented (every object is
fronted by its ``default_tier`` gate; keyless callers act at PUBLIC).
"""
from __future__ import annotations

import random
from dataclasses import dataclass, replace
from typing import Any, Callable, Dict, List, Mapping, Optional

from .model import (
    AccessKey,
    AccessTier,
    ANONYMOUS,
    BadRequest,
    ConflictRejected,
    EntityId,
    Forbidden,
    NotFound,
    VOState,
    VOStatus,
    parse_entity_id,
    service_id,
    _req_str,
)

# trusted management-plane caller used by the harness and scenario driver
ADMIN = service_id("registry-admin")


@dataclass(frozen=True)
class VODescriptor:
    id: EntityId
    owner: EntityId
    location: str
    functionalities: tuple
    endpoint: str
    status: VOStatus
    default_tier: AccessTier = AccessTier.PUBLIC

    def __post_init__(self):
        object.__setattr__(self, "functionalities", tuple(self.functionalities))
        if not self.functionalities:
            raise BadRequest("descriptor needs at least one functionality tag")

    def offers(self, requirement: str) -> bool:
        return requirement in self.functionalities

    def to_wire(self) -> dict:
        return {
            "id": self.id.wire,
            "owner": self.owner.wire,
            "location": self.location,
            "functionalities": list(self.functionalities),
            "endpoint": self.endpoint,
            "status": self.status.to_wire(),
            "default_tier": self.default_tier.wire,
        }

    @classmethod
    def from_wire(cls, data: Mapping[str, Any]) -> "VODescriptor":
        funcs = data.get("functionalities")
        if not isinstance(funcs, list) or not all(isinstance(f, str) for f in funcs):
            raise BadRequest("functionalities must be a list of strings")
        return cls(
            id=parse_entity_id(_req_str(data, "id")),
            owner=parse_entity_id(_req_str(data, "owner")),
            location=_req_str(data, "location"),
            functionalities=tuple(funcs),
            endpoint=_req_str(data, "endpoint"),
            status=VOStatus.from_wire(data.get("status", {})),
            default_tier=AccessTier.from_wire(data.get("default_tier", "public")),
        )


class KeyMinter:
    """Deterministic token factory; one seeded stream per registry."""

    def __init__(self, seed: str):
        self._rng = random.Random(seed)
        self.issued: Dict[str, AccessKey] = {}

    def mint(self, subject: EntityId, tier: AccessTier, holder: EntityId) -> AccessKey:
        token = f"{self._rng.getrandbits(256):064x}"
        key = AccessKey(subject=subject, tier=tier, token=token, holder=holder)
        self.issued[token] = key
        return key

    def resolve(self, token: str) -> Optional[AccessKey]:
        return self.issued.get(token)


class Registry:
    """Shared bookkeeping for both the VO and the ME registries:
    descriptor storage with ownership-guarded upserts, status revisions,
    and owner-authorized key minting."""

    def __init__(self, minter_seed: str,
                 access_updater: Optional[Callable[[EntityId, AccessKey, int], None]] = None):
        self._entries: Dict[EntityId, Any] = {}
        self._revisions: Dict[EntityId, int] = {}
        self.minter = KeyMinter(minter_seed)
        self.access_updater = access_updater
        self.grants: List[tuple] = []  # (target_id, key, priority) issue log

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, target_id: EntityId):
        desc = self._entries.get(target_id)
        if desc is None:
            raise NotFound(f"{target_id.wire} is not registered")
        return desc

    def list_ids(self) -> List[EntityId]:
        return sorted(self._entries)

    def register(self, desc) -> dict:
        existing = self._entries.get(desc.id)
        if existing is not None and existing.owner != desc.owner:
            raise ConflictRejected(f"{desc.id.wire} is owned by {existing.owner.wire}")
        self._entries[desc.id] = desc
        self._revisions.setdefault(desc.id, 0)
        return {"registered": desc.id.wire, "revision": self._revisions[desc.id]}

    def update_status(self, target_id: EntityId, status: VOStatus) -> dict:
        desc = self.get(target_id)
        self._entries[target_id] = replace(desc, status=status)
        self._revisions[target_id] += 1
        return {"revision": self._revisions[target_id]}

    def revision(self, target_id: EntityId) -> int:
        self.get(target_id)
        return self._revisions[target_id]

    def grant_access(self, target_id: EntityId, holder: EntityId, tier: AccessTier,
                     priority: int, caller: EntityId,
                     proof_token: Optional[str] = None) -> AccessKey:
        """Mint a key and push it to the target's access controller.

        Authorized callers: the target's owner, the management plane
        (ADMIN), or anyone presenting a PRIVATE-tier key they hold on
        this target.
        """
        desc = self.get(target_id)
        authorized = caller == desc.owner or caller == ADMIN
        if not authorized and proof_token is not None:
            proof = self.minter.resolve(proof_token)
            authorized = (proof is not None and proof.subject == target_id
                          and proof.holder == caller
                          and proof.tier is AccessTier.PRIVATE)
        if not authorized:
            raise Forbidden(f"only the owner of {target_id.wire} may grant access")
        if priority < 0:
            raise BadRequest("grant priority must be >= 0")
        key = self.minter.mint(target_id, tier, holder)
        self.grants.append((target_id, key, priority))
        if self.access_updater is not None:
            self.access_updater(target_id, key, priority)
        return key


class VORegistry(Registry):
    """Linearizable VO descriptor store with capability-scoped search."""

    def __init__(self, seed: int = 0, access_updater=None):
        super().__init__(f"{seed}/vo-registry", access_updater)

    def effective_tier(self, desc: VODescriptor, requester: EntityId,
                       tokens: tuple) -> AccessTier:
        """Best tier the requester's presented tokens open on this VO."""
        tier = AccessTier.PUBLIC
        for token in tokens:
            key = self.minter.resolve(token)
            if key is None:
                continue
            if key.subject == desc.id and key.holder == requester:
                tier = max(tier, key.tier)
        return tier

    def search(self, requirements: tuple, requester: EntityId = ANONYMOUS,
               tokens: tuple = (), include_offline: bool = False) -> List[tuple]:
        """ONLINE descriptors offering every requirement and open to the
        requester at their effective tier. Deterministic order (by id)."""
        out = []
        for vo_id in sorted(self._entries):
            desc = self._entries[vo_id]
            if not include_offline and desc.status.state is not VOState.ONLINE:
                continue
            if not all(desc.offers(r) for r in requirements):
                continue
            tier = self.effective_tier(desc, requester, tokens)
            if tier < desc.default_tier:
                continue
            out.append((desc, tier))
        return out
