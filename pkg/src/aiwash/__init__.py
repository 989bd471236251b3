"""Measurement and estimation toolkit for corporate AI-washing studies.

The package turns firm-quarter panels and disclosure texts into a rhetoric
score (AWRS), a real-investment index (MRMI) and a washing flag, and runs
the panel, event-study, IV and DID specifications built on them.
"""

__version__ = "0.1.0"
