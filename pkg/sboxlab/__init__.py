"""S-box countermeasure evaluation workbench"""

__version__ = "1.0.0"
