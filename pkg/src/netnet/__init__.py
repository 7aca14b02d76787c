"""Scale-aware feature pyramids by neighbor erasing and transferring, on a
small numpy single-shot detector trained on synthetic scenes."""

__version__ = "0.1.0"
