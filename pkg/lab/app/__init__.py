# Lab service package
