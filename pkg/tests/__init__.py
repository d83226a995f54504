"""Tests for drivesynth"""
