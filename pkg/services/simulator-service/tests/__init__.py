"""Tests for simulator service."""
