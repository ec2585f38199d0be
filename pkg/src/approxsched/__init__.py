"""Prompt-aware approximation scaling for text-to-image serving."""
