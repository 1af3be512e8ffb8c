"""Visual element extraction from scanned document pages.

Detection phrases go to a zero-shot detector service, boxes are filtered
and deduplicated, an optional segmenter adds pixel masks, and runs are
persisted as reviewable, exportable datasets.
"""

__version__ = "0.1.0"
