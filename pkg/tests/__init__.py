"""Tests for the mrverify package."""
