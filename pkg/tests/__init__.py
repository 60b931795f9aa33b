"""Tests for photonstat."""
