"""drivesynth - desk-scale free-viewpoint driving scene synthesis"""
__version__ = "0.3.0"
