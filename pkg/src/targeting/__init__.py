"""Coupon targeting and personalized pricing simulations."""
