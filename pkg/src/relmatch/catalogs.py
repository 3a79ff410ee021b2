"""Bundled relation catalogs."""

import json
from importlib import resources

from relmatch.model import RelationCatalog, catalog_from_dict

EXACT = "exactly_the_same"
GENERAL = "general_without_details"
ADDITIONAL = "additional_details"
WRONG = "wrong_details"
COMPONENT = "component"

ESG_RELATION_IDS = (EXACT, GENERAL, ADDITIONAL, WRONG, COMPONENT)


def esg_catalog_path():
    return resources.files("relmatch") / "data" / "esg_catalog.json"


def esg_catalog() -> RelationCatalog:
    """The five-relation catalog used for emission-factor matching."""
    return catalog_from_dict(json.loads(esg_catalog_path().read_text(encoding="utf-8")))
