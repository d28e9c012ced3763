"""Cross-lingual morphological inflection with meta-learned initializations."""

__version__ = "0.1.0"
